"""
Synthetic scenes with hard-to-see objects
=========================================

The generator paints textured ellipses. At ``blend=0`` an object is cut
from the background texture itself and is invisible except through its
motion; raising ``blend`` shifts its texture and palette away from the
background. Each object moves at constant velocity and
bounces off the borders; the count stays fixed within a sequence.
"""

from pathlib import Path

import numpy as np

from vidcount.data import (
    SyntheticSceneConfig,
    generate_pseudo_density,
    save_density_pgm,
    synthesize_sequence,
    write_sequence,
)

out = Path("demo_output/scenes")

# The same scene twice: fully camouflaged, and mostly distinct.
for blend in (0.0, 0.9):
    cfg = SyntheticSceneConfig(frame_size=(64, 64), num_frames=6, count_range=(5, 5),
                               blend=blend, seed=4, sequence_id=f"blend_{blend:.1f}")
    seq, pts = synthesize_sequence(cfg)
    write_sequence(out / cfg.sequence_id, seq, pts)
    frame = seq.frames[0].pixels
    ys, xs = np.mgrid[0:64, 0:64] + 0.5
    inside = np.zeros((64, 64), dtype=bool)
    for x, y in pts.points(0):
        inside |= np.hypot(xs - x, ys - y) < 2.0
    contrast = np.abs(frame[inside].mean(axis=0) - frame[~inside].mean(axis=0)).mean()
    print(f"blend {blend:.1f}: {pts.count(0)} objects, object/background colour gap {contrast:.3f}")

# Objects drift between frames.
track = np.stack([pts.points(i)[0] for i in range(6)])
print("first object's path (x, y):")
print(np.round(track, 2))

# The training target: one unit of mass per annotated point.
density = generate_pseudo_density(pts.points(0), 64, 64, sigma=4)
print(f"density mass {density.sum():.6f} for {pts.count(0)} points")
save_density_pgm(out / "density_frame0.pgm", density)
print(f"frames and density written under {out}/")
