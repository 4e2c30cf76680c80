"""
Query fusion and temporal context
=================================

Trains four small models, one per cell of {add, concat} x {1, 5 frames},
with the same seed and data, and prints their counting errors and wall
time. With only a few dozen steps the errors mostly show the harness
working; the extra cost of five-frame clips shows up clearly.
"""

from dataclasses import replace
from pathlib import Path

from vidcount.cli import cmd_ablate, cmd_generate
from vidcount.config import load_config

root = Path("demo_output/ablation")
cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "overfit.ini")
cfg = replace(cfg, train=replace(cfg.train, steps=40))

data = cmd_generate(cfg, root / "data")
rows = cmd_ablate(cfg, root, data)

print(f"{'mode':8s} {'T':>2s} {'MAE':>7s} {'MSE':>7s} {'NAE':>7s} {'seconds':>8s}")
for mode, frames, mae, mse, nae, wall in rows:
    print(f"{mode:8s} {frames:2d} {mae:7.3f} {mse:7.3f} {nae:7.3f} {wall:8.1f}")
