"""
Shift in, shift out
===================

Audit a few operators: shift the input, run the operator, and compare with
the shifted output. Sliding operators agree everywhere except a border band;
pooled attention and absolute positions do not.
"""

import numpy as np

from teaformer.attention import AttnParams, SlideSpec
from teaformer.equivariance import (
    ShiftOp,
    askv_operator,
    audit,
    conv_operator,
    dsa_operator,
    sa_abs_pos_operator,
    shift_grid,
    skv_operator,
    tea_operator,
)

rng = np.random.default_rng([0, 1])
x = rng.normal(size=(32, 32, 4))
spec = SlideSpec(5, 1, 3, 16)
p = AttnParams.init(4, spec, np.random.default_rng([0, 0]), offset_scale=0.5)

###############################################################################
# Each operator declares the border band it needs; the audit shrinks the
# compared region by that band plus the shift.

operators = [
    conv_operator(rng.normal(size=(3, 3, 4))),
    skv_operator(p, spec),
    askv_operator(p, spec, x),  # band widened by how far the learned offsets reach
    dsa_operator(p, spec),
    tea_operator(p, spec, x),
    sa_abs_pos_operator(p, rng.normal(size=x.shape)),
]

shifts = shift_grid(4)
for op in operators:
    report = audit(op, x, shifts)
    print(f"{op.name:<12} margin={report.margin:<2} te_score={report.te_score:.3f} "
          f"max_dev={report.max_abs_dev:.1e} -> {report.verdict}")

###############################################################################
# Pooled attention is exact again once the shift is a whole number of pooling
# cells (here 8 pixels).

print(audit(dsa_operator(p, spec), x, [ShiftOp(8, 8)]).to_text())
