"""
Counting multiply-accumulates
=============================

Run each attention once under an instrumented counter and compare the tally
with the closed-form count. Quadrupling the token count quadruples the work
of the sliding-plus-pooled attention and multiplies full attention by 16.
"""

from teaformer.attention import SlideSpec
from teaformer.cost import analytic_cost, measure, scaling_report, tea_nonprojection_per_token

spec = SlideSpec(7, 2, 3, 16)

###############################################################################
# Term by term for one size.

measured = measure("tea", 1024, 32, spec)
expected = analytic_cost(1024, 32, spec)
for name, got, want in zip(("qkv_proj", "offset_convs", "attn_map", "reweight", "dsa"),
                           measured.terms(), expected.terms()):
    print(f"{name:<13} counted={got:>10} formula={want:>10}")
print("outside the formula:", measured.extras)

###############################################################################
# Growth with N.

print(scaling_report("tea", [256, 1024, 4096], d=8, spec=spec).to_text())
print(scaling_report("sa", [64, 256, 1024], d=8).to_text())

# per token, default spec (15, 4, 3, 16), against 16 x 16 window attention
print("tea per token:", tea_nonprojection_per_token(1, SlideSpec()), "x D;  window-16: 512 x D")
