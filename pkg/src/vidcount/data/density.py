"""Pseudo density maps built from point annotations."""

from __future__ import annotations

import numpy as np

DEFAULT_SIGMA = 4.0


def generate_pseudo_density(points, height: int, width: int,
                            sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """Sum of per-point Gaussians, each truncated at 4*sigma and renormalized.

    The kernel is evaluated at pixel centers and clipped to the frame before
    normalization, so every point contributes exactly unit mass, even at a
    corner.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    grid = np.zeros((height, width))
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    radius = 4.0 * sigma
    for x, y in pts:
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"point ({x}, {y}) outside {width}x{height} frame")
        x0, x1 = max(0, int(np.floor(x - radius))), min(width, int(np.ceil(x + radius)) + 1)
        y0, y1 = max(0, int(np.floor(y - radius))), min(height, int(np.ceil(y + radius)) + 1)
        xs = np.arange(x0, x1) + 0.5 - x
        ys = np.arange(y0, y1) + 0.5 - y
        d2 = ys[:, None] ** 2 + xs[None, :] ** 2
        k = np.exp(-d2 / (2 * sigma * sigma))
        k[d2 > radius * radius] = 0.0
        total = k.sum()
        if total == 0:
            # sub-pixel point whose window holds no center inside the radius
            k[int(y) - y0, int(x) - x0] = 1.0
            total = 1.0
        grid[y0:y1, x0:x1] += k / total
    return grid


def crop_density(grid: np.ndarray, x0: int, y0: int, size: int) -> np.ndarray:
    return grid[y0:y0 + size, x0:x0 + size]


def save_density_pgm(path, grid: np.ndarray) -> float:
    """Write a P5 image scaled so the max density maps to 255.

    The scale factor (density per gray level) is written to ``<path>.scale.txt``
    and returned.
    """
    grid = np.asarray(grid, dtype=np.float64)
    peak = float(grid.max()) if grid.size else 0.0
    factor = peak / 255.0 if peak > 0 else 0.0
    img = np.zeros(grid.shape, dtype=np.uint8) if factor == 0 else \
        np.clip(np.round(grid / factor), 0, 255).astype(np.uint8)
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    with open(f"{path}.scale.txt", "w", encoding="utf-8") as fh:
        fh.write(f"{factor!r}\n")
    return factor
