"""
Two small restorers on a toy denoising task
===========================================

Train the same reduced network twice, once with sliding-plus-pooled
attention blocks and once with fixed non-overlapping windows, and print the
loss curves side by side. Small models, short runs: the numbers move with
the seed.
"""

import sys

from teaformer.model import count_params
from teaformer.training import desk_config, train_toy

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
seed = 1

runs = {}
for variant in ("tea", "wa"):
    cfg = desk_config(variant)
    runs[variant] = train_toy(cfg, steps, seed, lr=1e-3)
    print(f"{variant}: {count_params(cfg)} parameters")

###############################################################################
# Loss every 25 steps, then the mean of the last 50.

for step in range(0, steps, 25):
    print(f"step {step:>4}  tea {runs['tea'].losses[step]:.4f}  wa {runs['wa'].losses[step]:.4f}")
print(f"final   tea {runs['tea'].final_loss():.4f}  wa {runs['wa'].final_loss():.4f}")
