"""
A short pre-training run, then a probe at every depth
=====================================================

Pre-train the desk model for a few epochs on the synthetic shapes, then fit
a linear classifier on frozen mean-pooled features taken after each encoder
block.  Layer 0 is the patch embedding itself.  A few minutes on one CPU.
"""

import sys
from pathlib import Path

from splitmask.config import load_config
from splitmask.plotting import loss_curve, probe_curve
from splitmask.train import load_datasets, pretrain, probe, write_eval_rows

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "pretrain"
cfg = load_config(None, ["model.vocab_size=64", "schedule.epochs=20", "tokenizer.sample_budget=8000"])
train, test = load_datasets(cfg)

result = pretrain(cfg, out, train=train)
print(f"{result.total_steps} steps; last row: {result.metrics[-1]}")
loss_curve(out / "metrics.csv", out / "loss_curve.svg")

acc = probe(cfg, train, test, model=result.model)
write_eval_rows(out / "probe.csv", "demo", cfg.seed, {f"layer_{k}": v for k, v in acc.items()})
probe_curve(out / "probe.csv", out / "probe_curve.svg")
for layer, a in acc.items():
    print(f"layer {layer}: {a:.3f}")
