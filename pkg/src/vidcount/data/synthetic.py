"""Procedural clips of camouflaged moving objects with exact point ground truth.

Backgrounds are multi-octave value noise. Each object is a soft-edged
ellipse whose texture samples the same noise field, displaced and recoloured
in proportion to ``blend``: at ``blend=0`` an object is drawn from the
background itself, at ``blend=1`` it has its own palette and a shifted
texture. Objects move at constant velocity and bounce off the borders, so
they never leave the frame and the per-frame count is constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import Frame, FrameSequence, PointAnnotationSet


class SceneConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSceneConfig:
    frame_size: tuple[int, int] = (64, 64)
    num_frames: int = 10
    count_range: tuple[int, int] = (1, 5)
    object_radius_range: tuple[float, float] = (3.0, 5.0)
    blend: float = 0.6
    max_speed: float = 1.5
    seed: int = 0
    fps: float = 25.0
    sequence_id: str = "synthetic"

    def validate(self) -> None:
        h, w = self.frame_size
        lo, hi = self.count_range
        rlo, rhi = self.object_radius_range
        if h <= 0 or w <= 0 or self.num_frames <= 0:
            raise SceneConfigError("frame size and num_frames must be positive")
        if lo < 0 or lo > hi:
            raise SceneConfigError(f"invalid count_range {self.count_range}")
        if rlo <= 0 or rlo > rhi:
            raise SceneConfigError(f"invalid object_radius_range {self.object_radius_range}")
        if not 0.0 <= self.blend <= 1.0:
            raise SceneConfigError(f"blend {self.blend} outside [0, 1]")
        if self.max_speed < 0:
            raise SceneConfigError("max_speed must be non-negative")
        if 2 * rhi >= min(h, w):
            raise SceneConfigError(
                f"objects of radius {rhi} cannot fit inside a {h}x{w} frame")


class ValueNoise:
    """Periodic lattice value noise, summed over octaves and scaled to [0, 1]."""

    def __init__(self, rng: np.random.Generator, base_cell: float = 16.0, octaves: int = 4,
                 lattice: int = 64):
        self.cells = [base_cell / 2 ** k for k in range(octaves)]
        self.amps = [0.5 ** k for k in range(octaves)]
        self.tables = [rng.random((lattice, lattice)) for _ in range(octaves)]
        self.lattice = lattice

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        total = np.zeros(np.broadcast(x, y).shape)
        n = self.lattice
        for cell, amp, table in zip(self.cells, self.amps, self.tables):
            gx, gy = x / cell, y / cell
            ix, iy = np.floor(gx).astype(int), np.floor(gy).astype(int)
            fx, fy = gx - ix, gy - iy
            fx = fx * fx * (3 - 2 * fx)
            fy = fy * fy * (3 - 2 * fy)
            x0, x1 = ix % n, (ix + 1) % n
            y0, y1 = iy % n, (iy + 1) % n
            top = table[y0, x0] * (1 - fx) + table[y0, x1] * fx
            bot = table[y1, x0] * (1 - fx) + table[y1, x1] * fx
            total += amp * (top * (1 - fy) + bot * fy)
        return total / sum(self.amps)


def _palette(rng: np.random.Generator):
    # water-like tints: dark/light endpoints of a blue-green-brown family
    hue = rng.random()
    dark = np.array([0.10 + 0.15 * hue, 0.20 + 0.10 * rng.random(), 0.25 - 0.1 * hue])
    light = dark + np.array([0.25, 0.35, 0.30]) * (0.8 + 0.4 * rng.random())
    return np.clip(dark, 0, 1), np.clip(light, 0, 1)


def _reflect(p: np.ndarray, v: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    p = p + v
    for _ in range(4):
        under, over = p < lo, p > hi
        if not (under.any() or over.any()):
            break
        p = np.where(under, 2 * lo - p, p)
        p = np.where(over, 2 * hi - p, p)
        v = np.where(under | over, -v, v)
    return np.clip(p, lo, hi), v


def synthesize_sequence(config: SyntheticSceneConfig) -> tuple[FrameSequence, PointAnnotationSet]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    h, w = config.frame_size
    noise = ValueNoise(rng)
    bg_dark, bg_light = _palette(rng)
    obj_dark = np.clip(bg_light[[2, 0, 1]] + 0.25, 0, 1)
    obj_light = np.clip(obj_dark + 0.2, 0, 1)
    tex_offset = rng.uniform(20.0, 40.0, size=2)

    n_obj = int(rng.integers(config.count_range[0], config.count_range[1] + 1))
    radius = rng.uniform(*config.object_radius_range, size=n_obj)
    aspect = rng.uniform(0.55, 1.0, size=n_obj)
    angle = rng.uniform(0, np.pi, size=n_obj)
    lo = np.stack([radius, radius], axis=1)
    hi = np.stack([w - radius, h - radius], axis=1)
    pos = lo + rng.random((n_obj, 2)) * (hi - lo)
    heading = rng.uniform(0, 2 * np.pi, size=n_obj)
    speed = rng.uniform(0, config.max_speed, size=n_obj)
    vel = np.stack([np.cos(heading), np.sin(heading)], axis=1) * speed[:, None]

    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    shade = noise(xs, ys)[..., None]
    background = bg_dark + (bg_light - bg_dark) * shade
    shift = config.blend * tex_offset
    obj_shade = noise(xs + shift[0], ys + shift[1])[..., None]
    camo = bg_dark + (bg_light - bg_dark) * obj_shade
    distinct = obj_dark + (obj_light - obj_dark) * obj_shade
    texture = (1 - config.blend) * camo + config.blend * distinct

    frames, points = [], PointAnnotationSet()
    for t in range(config.num_frames):
        if t:
            pos, vel = _reflect(pos, vel, lo, hi)
        img = background.copy()
        for k in range(n_obj):
            dx, dy = xs - pos[k, 0], ys - pos[k, 1]
            c, s = np.cos(angle[k]), np.sin(angle[k])
            u = (c * dx + s * dy) / radius[k]
            v = (-s * dx + c * dy) / (radius[k] * aspect[k])
            alpha = np.clip((1.0 - np.sqrt(u * u + v * v)) / 0.3, 0.0, 1.0)[..., None]
            img = img * (1 - alpha) + texture * alpha
        frames.append(Frame(t, np.clip(img, 0.0, 1.0)))
        points.frames[t] = pos.copy()
    seq = FrameSequence(config.sequence_id, config.fps, frames, width=w, height=h)
    return seq, points
