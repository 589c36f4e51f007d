"""
Holding the number of updates fixed
===================================

Smaller datasets get proportionally more epochs so that every run performs
about the same number of optimisation steps, up to a cap.
"""

import math

from splitmask.train import IMAGENET_TRAIN, EPOCH_PRESETS, epoch_budget

print("ImageNet subsets at a 300-epoch reference")
for frac in (1.0, 0.5, 0.1, 0.01):
    e = epoch_budget(frac * IMAGENET_TRAIN, IMAGENET_TRAIN, 300, cap=math.inf)
    print(f"  {frac:>5.0%} of the images -> {e:>6} epochs")

# the raw rule gives ~3249 epochs for COCO; rounding to a thousand gives the published 3000
coco = 118_287
print("COCO, raw rule:", epoch_budget(coco, IMAGENET_TRAIN, 300, cap=math.inf))
print("COCO, rounded:", epoch_budget(coco, IMAGENET_TRAIN, 300, cap=math.inf, round_to=1000))

print("\nNamed presets")
for name, epochs in EPOCH_PRESETS.items():
    print(f"  {name:>16}: {epochs}")
