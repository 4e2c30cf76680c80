"""Fixed-size patch grids with a deterministic ownership partition."""

from __future__ import annotations

from dataclasses import dataclass


def axis_origins(extent: int, patch: int) -> list[int]:
    if patch <= 0:
        raise ValueError("patch size must be positive")
    if patch > extent:
        raise ValueError(f"patch size {patch} exceeds frame extent {extent}")
    origins = list(range(0, extent - patch + 1, patch))
    if origins[-1] + patch < extent:
        origins.append(extent - patch)
    return origins


def axis_ownership(origins: list[int], extent: int) -> list[tuple[int, int]]:
    bounds = origins[1:] + [extent]
    return list(zip(origins, bounds))


@dataclass(frozen=True)
class PatchGrid:
    """Patch origins as (x0, y0) plus the half-open rectangle each one owns.

    ``ownership[k]`` is ``(x_lo, x_hi, y_lo, y_hi)`` for ``origins[k]``.
    """

    patch_size: int
    height: int
    width: int
    origins: tuple[tuple[int, int], ...]
    ownership: tuple[tuple[int, int, int, int], ...]

    def owner(self, x: float, y: float) -> int:
        for k, (x0, x1, y0, y1) in enumerate(self.ownership):
            if x0 <= x < x1 and y0 <= y < y1:
                return k
        raise ValueError(f"({x}, {y}) outside the frame")


def crop_patches(frame_extent: tuple[int, int], patch_size: int) -> PatchGrid:
    """Tile an (H, W) frame; the last origin per axis is clamped to extent - patch."""
    h, w = frame_extent
    if patch_size > min(h, w):
        raise ValueError(f"patch size {patch_size} exceeds frame extent {h}x{w}")
    xs, ys = axis_origins(w, patch_size), axis_origins(h, patch_size)
    x_own, y_own = axis_ownership(xs, w), axis_ownership(ys, h)
    origins, owns = [], []
    for y0, (ylo, yhi) in zip(ys, y_own):
        for x0, (xlo, xhi) in zip(xs, x_own):
            origins.append((x0, y0))
            owns.append((xlo, xhi, ylo, yhi))
    return PatchGrid(patch_size, h, w, tuple(origins), tuple(owns))
