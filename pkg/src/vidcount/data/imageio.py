"""Binary PPM (P6) frame files."""

from __future__ import annotations

import os

import numpy as np


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, pixels: np.ndarray) -> None:
    """``pixels`` is H x W x 3 in [0, 1] (floats) or uint8."""
    img = pixels if pixels.dtype == np.uint8 else to_uint8(pixels)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def _tokens(data: bytes, count: int):
    out, pos = [], 0
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        out.append(data[start:pos])
    return out, pos + 1


def read_ppm(path) -> np.ndarray:
    """Return H x W x 3 floats in [0, 1]."""
    with open(path, "rb") as fh:
        data = fh.read()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    if magic != b"P6" or int(maxval) != 255:
        raise ValueError(f"{os.fspath(path)}: expected P6 with maxval 255")
    w, h = int(w), int(h)
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).astype(np.float64) / 255.0


def frame_filename(index: int) -> str:
    return f"frame_{index:06d}.ppm"
