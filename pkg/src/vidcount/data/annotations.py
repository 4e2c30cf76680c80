"""Point-annotation files (JSON) and the in-memory sequence types."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class AnnotationParseError(ValueError):
    """Malformed annotation content."""


class AnnotationBoundsError(ValueError):
    """A point lies outside its frame."""

    def __init__(self, frame_index: int, point, width: int, height: int):
        super().__init__(
            f"frame {frame_index}: point ({point[0]}, {point[1]}) outside "
            f"[0,{width})x[0,{height})"
        )
        self.frame_index = frame_index


@dataclass
class Frame:
    index: int
    pixels: np.ndarray  # H x W x 3, values in [0, 1]


@dataclass
class FrameSequence:
    sequence_id: str
    fps: float
    frames: list[Frame] = field(default_factory=list)
    width: int = 0
    height: int = 0

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if self.frames:
            h, w = self.frames[0].pixels.shape[:2]
            if not self.width:
                self.width, self.height = w, h
            prev = -1
            for fr in self.frames:
                if fr.pixels.shape[:2] != (self.height, self.width):
                    raise ValueError(f"frame {fr.index} has size {fr.pixels.shape[:2]}, "
                                     f"expected {(self.height, self.width)}")
                if fr.index <= prev:
                    raise ValueError("frame indices must be strictly increasing")
                prev = fr.index

    def __len__(self):
        return len(self.frames)

    def stack(self) -> np.ndarray:
        """All frames as a (T, H, W, 3) array."""
        return np.stack([f.pixels for f in self.frames])


@dataclass
class PointAnnotationSet:
    """Per-frame lists of (x, y) pixel coordinates, keyed by frame index."""

    frames: dict[int, np.ndarray] = field(default_factory=dict)

    def points(self, index: int) -> np.ndarray:
        return self.frames.get(index, np.zeros((0, 2)))

    def count(self, index: int) -> int:
        return len(self.points(index))

    @property
    def indices(self) -> list[int]:
        return sorted(self.frames)

    def validate(self, width: int, height: int) -> None:
        for idx in self.indices:
            for p in self.frames[idx]:
                if not (0 <= p[0] < width and 0 <= p[1] < height):
                    raise AnnotationBoundsError(idx, p, width, height)


@dataclass
class SequenceMeta:
    sequence_id: str
    fps: float
    width: int
    height: int
    frame_indices: list[int]


def _fmt(v: float) -> str:
    return f"{v:.6f}"


def dumps_annotations(meta: SequenceMeta, points: PointAnnotationSet) -> str:
    # hand-rolled so coordinates keep fixed 6-decimal text
    frames = []
    for idx in meta.frame_indices:
        pts = ", ".join(f"[{_fmt(x)}, {_fmt(y)}]" for x, y in points.points(idx))
        frames.append(f'    {{"index": {int(idx)}, "points": [{pts}]}}')
    frames_txt = "[\n" + ",\n".join(frames) + "\n  ]" if frames else "[]"
    return (
        "{\n"
        f'  "sequence_id": {json.dumps(meta.sequence_id)},\n'
        f'  "fps": {json.dumps(float(meta.fps))},\n'
        f'  "width": {int(meta.width)},\n'
        f'  "height": {int(meta.height)},\n'
        f'  "frames": {frames_txt}\n'
        "}\n"
    )


def save_annotations(path, meta: SequenceMeta, points: PointAnnotationSet) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_annotations(meta, points))


def _require(obj: dict, key: str, kinds, where: str):
    if key not in obj:
        raise AnnotationParseError(f"{where}: missing field {key!r}")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, kinds):
        raise AnnotationParseError(f"{where}: field {key!r} has wrong type {type(val).__name__}")
    return val


def load_annotations(content: bytes | str) -> tuple[SequenceMeta, PointAnnotationSet]:
    """Parse annotation JSON into sequence metadata and per-frame points."""
    if isinstance(content, bytes):
        try:
            content = content.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise AnnotationParseError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(content)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(f"line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise AnnotationParseError("top level must be an object")

    seq_id = _require(doc, "sequence_id", str, "header")
    fps = float(_require(doc, "fps", (int, float), "header"))
    width = _require(doc, "width", int, "header")
    height = _require(doc, "height", int, "header")
    frames = _require(doc, "frames", list, "header")

    pts = PointAnnotationSet()
    indices = []
    for k, fr in enumerate(frames):
        where = f"frames[{k}]"
        if not isinstance(fr, dict):
            raise AnnotationParseError(f"{where}: expected object")
        idx = _require(fr, "index", int, where)
        raw = _require(fr, "points", list, where)
        arr = np.zeros((len(raw), 2))
        for j, p in enumerate(raw):
            if (not isinstance(p, list) or len(p) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in p)):
                raise AnnotationParseError(f"{where}.points[{j}]: expected [x, y] numbers")
            arr[j] = p
        if indices and idx <= indices[-1]:
            raise AnnotationParseError(f"{where}: index {idx} not increasing")
        indices.append(idx)
        pts.frames[idx] = arr
    pts.validate(width, height)
    return SequenceMeta(seq_id, fps, width, height, indices), pts
