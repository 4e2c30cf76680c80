"""
Training a small counter end to end
===================================

Generates a few short sequences, trains a small model for a couple of
hundred steps and scores it with the patch-based counting protocol. The
numbers are far from converged; the point is to walk through the pieces.
Runs in well under a minute on one core.
"""

from dataclasses import replace
from pathlib import Path

from vidcount.cli import cmd_eval, cmd_generate, cmd_train
from vidcount.config import load_config

root = Path("demo_output/train_eval")
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "overfit.ini")
cfg = replace(cfg, train=replace(cfg.train, steps=200, checkpoint_interval=100))

data = cmd_generate(cfg, root / "data")
print("sequences:", sorted(p.name for p in data.iterdir() if p.is_dir()))

params, log = cmd_train(cfg, root / "run", data)
totals = log.totals()
print(f"loss: first 20 steps {totals[:20].mean():.3f}, last 20 steps {totals[-20:].mean():.3f}")

report, rows = cmd_eval(root / "run" / "checkpoint.bin", "train", cfg, root / "eval", data)
for row in rows[:5]:
    print(row)
print("per-frame CSV:", root / "eval" / "metrics_train.csv")
