"""Joint training loop (density, localization and classification terms)."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .config import OptimConfig, RunConfig
from .data.density import generate_pseudo_density
from .evaluation import clip_indices
from .matching import LossBreakdown, LossWeights, batch_loss
from .model import ModelParams, model_forward

log = logging.getLogger(__name__)


class NumericFailure(RuntimeError):
    pass


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam.m/{k}": a for k, a in self.m.items()}
        out.update({f"adam.v/{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: dict[str, np.ndarray]) -> AdamState:
        m = {k[len("adam.m/"):]: a.copy() for k, a in arrays.items() if k.startswith("adam.m/")}
        v = {k[len("adam.v/"):]: a.copy() for k, a in arrays.items() if k.startswith("adam.v/")}
        return cls(step, m, v)


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
                optim: OptimConfig) -> None:
    state.step += 1
    t = state.step
    c1 = 1.0 - optim.beta1 ** t
    c2 = 1.0 - optim.beta2 ** t
    for name in params.names():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name, 0.0) * optim.beta1 + (1 - optim.beta1) * g
        v = state.v.get(name, 0.0) * optim.beta2 + (1 - optim.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        p.data = p.data - optim.step_size * (m / c1) / (np.sqrt(v / c2) + optim.eps)


@dataclass
class TrainLog:
    rows: list[tuple[int, float, float, float, float]] = field(default_factory=list)

    def append(self, step: int, b: LossBreakdown) -> None:
        if self.rows and step <= self.rows[-1][0]:
            raise ValueError("train log steps must increase")
        self.rows.append((step, b.l_cls, b.l_loc, b.l_dm, b.total))

    def totals(self) -> np.ndarray:
        return np.array([r[4] for r in self.rows])

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("step", "l_cls", "l_loc", "l_dm", "total"))
            for r in self.rows:
                w.writerow((r[0],) + tuple(repr(float(x)) for x in r[1:]))


class TrainingSet:
    """Frame stacks plus per-frame points and full-frame pseudo densities."""

    def __init__(self, sequences, sigma: float):
        self.stacks, self.points, self.densities, self.ids = [], [], [], []
        for seq, pts in sequences:
            stack = seq.stack()
            self.stacks.append(stack)
            self.ids.append(seq.sequence_id)
            frame_pts = [pts.points(fr.index) for fr in seq.frames]
            self.points.append(frame_pts)
            h, w = stack.shape[1:3]
            self.densities.append(np.stack([generate_pseudo_density(p, h, w, sigma)
                                            for p in frame_pts]))
        if not self.stacks:
            raise ValueError("training split is empty")

    @property
    def n_frames(self) -> int:
        return sum(len(s) for s in self.stacks)

    def sample(self, rng: np.random.Generator, crop: int, frames: int, reference: int):
        """One random clip: window shared by all T frames, targets for the reference frame."""
        s = int(rng.integers(len(self.stacks)))
        stack = self.stacks[s]
        n, h, w, _ = stack.shape
        if min(h, w) < crop:
            raise ValueError(f"sequence {self.ids[s]}: frame {h}x{w} smaller than crop {crop}")
        pos = int(rng.integers(n))
        y0 = int(rng.integers(h - crop + 1))
        x0 = int(rng.integers(w - crop + 1))
        idx = clip_indices(pos, n, frames, reference)
        clip = stack[idx, y0:y0 + crop, x0:x0 + crop, :]
        target = self.densities[s][idx, y0:y0 + crop, x0:x0 + crop]
        pts = self.points[s][pos]
        inside = (pts[:, 0] >= x0) & (pts[:, 0] < x0 + crop) & (pts[:, 1] >= y0) & (pts[:, 1] < y0 + crop)
        gts = (pts[inside] - [x0, y0]) / crop
        return clip, gts, target


def resolve_steps(cfg: RunConfig, n_frames: int) -> int:
    if cfg.train.epochs > 0:
        return cfg.train.epochs * math.ceil(n_frames / cfg.train.batch_clips)
    return cfg.train.steps


def train_step(params: ModelParams, batch, weights: LossWeights, state: AdamState,
               optim: OptimConfig) -> LossBreakdown:
    with ad.Tape():
        preds, dens = [], []
        for clip, _, _ in batch:
            p, d = model_forward(clip, params)
            if not (np.all(np.isfinite(p.xy)) and np.all(np.isfinite(p.conf))
                    and np.all(np.isfinite(d.data))):
                raise NumericFailure(f"non-finite model output at step {state.step + 1}")
            preds.append(p)
            dens.append(d)
        total, breakdown, _ = batch_loss(preds, dens, [b[1] for b in batch],
                                         [b[2] for b in batch], weights)
        if not np.isfinite(breakdown.total):
            raise NumericFailure(f"non-finite loss at step {state.step + 1}")
        grads = ad.backpropagate(total).by_name()
    adam_update(params, grads, state, optim)
    return breakdown


def train(params: ModelParams, data: TrainingSet, cfg: RunConfig, state: AdamState | None = None,
          steps: int | None = None, checkpoint_path=None, train_log: TrainLog | None = None) -> TrainLog:
    """Run optimizer steps ``state.step + 1 .. steps``.

    Randomness for step ``k`` comes from ``default_rng([seed, k])``, so a run
    resumed from a checkpoint replays exactly the same batches.
    """
    state = state or AdamState()
    train_log = train_log or TrainLog()
    steps = resolve_steps(cfg, data.n_frames) if steps is None else steps
    mc = params.config
    interval = cfg.train.checkpoint_interval
    while state.step < steps:
        rng = np.random.default_rng([cfg.train.seed, state.step + 1])
        batch = [data.sample(rng, mc.crop_size, mc.frames, mc.reference_frame)
                 for _ in range(cfg.train.batch_clips)]
        b = train_step(params, batch, cfg.loss, state, cfg.optim)
        train_log.append(state.step, b)
        if state.step % 50 == 0:
            log.info("step %d total %.5f (cls %.4f loc %.4f dm %.5f)",
                     state.step, b.total, b.l_cls, b.l_loc, b.l_dm)
        if checkpoint_path and interval > 0 and state.step % interval == 0:
            save_checkpoint(checkpoint_path, params, state.arrays(),
                            {"step": state.step, "seed": cfg.train.seed})
    if checkpoint_path:
        save_checkpoint(checkpoint_path, params, state.arrays(),
                        {"step": state.step, "seed": cfg.train.seed})
    return train_log
