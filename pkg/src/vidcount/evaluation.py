"""Inference protocol and counting metrics.

Frames are tiled into training-size patches, each patch gets a clip of T
neighbouring frames cut from the same window, low-confidence predictions are
dropped, and the survivors are stitched back using the patch ownership
partition so overlapping patches never count a point twice.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data.patches import PatchGrid, crop_patches
from .model import ModelParams, PointPredictionSet, model_forward

DEFAULT_THRESHOLD = 0.3
CSV_HEADER = ("sequence_id", "frame_index", "gt_count", "pred_count", "abs_err")


@dataclass(frozen=True)
class InferenceConfig:
    threshold: float = DEFAULT_THRESHOLD
    patch_size: int = 64

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} outside [0, 1]")


@dataclass(frozen=True)
class MetricsReport:
    mae: float
    mse: float
    nae: float
    n_frames: int
    n_frames_nae: int

    def render(self) -> str:
        return f"MAE {self.mae:.3f} MSE {self.mse:.3f} NAE {self.nae:.3f}"

    def __str__(self) -> str:
        return self.render()


def filter_by_threshold(preds: PointPredictionSet, threshold: float = DEFAULT_THRESHOLD) -> PointPredictionSet:
    """Keep predictions whose confidence is strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside [0, 1]")
    keep = np.flatnonzero(preds.conf > threshold)
    return PointPredictionSet(ad.Tensor(preds.xy[keep].reshape(-1, 2)), ad.Tensor(preds.conf[keep]))


def stitch_patch_predictions(per_patch: dict, grid: PatchGrid) -> np.ndarray:
    """Map per-patch normalized points to frame pixels, keeping only owned ones.

    ``per_patch`` maps a patch origin ``(x0, y0)`` to a prediction set or an
    (n, 2) array of normalized points. Returns the kept (k, 2) pixel points in
    grid order.
    """
    index = {o: k for k, o in enumerate(grid.origins)}
    for origin in per_patch:
        if tuple(origin) not in index:
            raise KeyError(f"prediction from unknown patch origin {origin}")
    kept = []
    for k, origin in enumerate(grid.origins):
        if origin not in per_patch:
            continue
        item = per_patch[origin]
        pts = item.xy if isinstance(item, PointPredictionSet) else np.asarray(item, dtype=np.float64)
        pts = pts.reshape(-1, 2)
        x_lo, x_hi, y_lo, y_hi = grid.ownership[k]
        gx = origin[0] + pts[:, 0] * grid.patch_size
        gy = origin[1] + pts[:, 1] * grid.patch_size
        own = (gx >= x_lo) & (gx < x_hi) & (gy >= y_lo) & (gy < y_hi)
        kept.append(np.stack([gx[own], gy[own]], axis=1))
    return np.concatenate(kept, axis=0) if kept else np.zeros((0, 2))


def compute_metrics(pred_counts, gt_counts) -> MetricsReport:
    """MAE, root-mean-square error and NAE (frames with a zero ground truth skipped)."""
    p = np.asarray(pred_counts, dtype=np.float64)
    g = np.asarray(gt_counts, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 1:
        raise ValueError("prediction and ground-truth count lists differ in length")
    if p.size == 0:
        raise ValueError("no frames to score")
    if np.any(p < 0) or np.any(g < 0):
        raise ValueError("counts must be non-negative")
    err = np.abs(p - g)
    mae = float(err.mean())
    mse = math.sqrt(float((err ** 2).mean()))
    pos = g > 0
    nae = float((err[pos] / g[pos]).mean()) if pos.any() else 0.0
    return MetricsReport(mae, mse, nae, int(p.size), int(pos.sum()))


def clip_indices(position: int, length: int, frames: int, reference: int) -> list[int]:
    """Positions of a T-frame window around ``position``, edge frames repeated at the ends."""
    return [min(max(position - reference + k, 0), length - 1) for k in range(frames)]


def predict_frame(params: ModelParams, stack: np.ndarray, position: int,
                  threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Pixel points counted in one frame of a (N, H, W, 3) frame stack."""
    cfg = params.config
    n, h, w, _ = stack.shape
    if min(h, w) < cfg.crop_size:
        raise ValueError(f"frame {h}x{w} smaller than patch size {cfg.crop_size}")
    grid = crop_patches((h, w), cfg.crop_size)
    idx = clip_indices(position, n, cfg.frames, cfg.reference_frame)
    per_patch = {}
    with ad.no_grad():
        for x0, y0 in grid.origins:
            clip = stack[idx, y0:y0 + cfg.crop_size, x0:x0 + cfg.crop_size, :]
            preds, _ = model_forward(clip, params)
            per_patch[(x0, y0)] = filter_by_threshold(preds, threshold)
    return stitch_patch_predictions(per_patch, grid)


def evaluate_split(params: ModelParams, sequences, threshold: float = DEFAULT_THRESHOLD):
    """Score every frame of every ``(FrameSequence, PointAnnotationSet)`` pair.

    Returns the metrics report and per-frame rows
    ``(sequence_id, frame_index, gt_count, pred_count, abs_err)``.
    """
    rows = []
    for seq, points in sequences:
        stack = seq.stack()
        for pos, frame in enumerate(seq.frames):
            pred = len(predict_frame(params, stack, pos, threshold))
            gt = points.count(frame.index)
            rows.append((seq.sequence_id, frame.index, gt, pred, abs(pred - gt)))
    if not rows:
        raise ValueError("split contains no frames")
    report = compute_metrics([r[3] for r in rows], [r[2] for r in rows])
    return report, rows


def format_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(rows)
    return buf.getvalue()


def write_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(rows))
