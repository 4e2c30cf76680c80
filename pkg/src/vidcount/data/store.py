"""On-disk dataset layout.

::

    root/
      manifest.json             # sequence ids and train/val/test membership
      <sequence_id>/
        annotations.json
        frame_000000.ppm
        ...
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from .annotations import Frame, FrameSequence, PointAnnotationSet, SequenceMeta, \
    load_annotations, save_annotations
from .imageio import frame_filename, read_ppm, write_ppm

ANNOTATION_FILE = "annotations.json"
MANIFEST_FILE = "manifest.json"


def write_sequence(directory, seq: FrameSequence, points: PointAnnotationSet) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for fr in seq.frames:
        write_ppm(directory / frame_filename(fr.index), fr.pixels)
    meta = SequenceMeta(seq.sequence_id, seq.fps, seq.width, seq.height,
                        [fr.index for fr in seq.frames])
    save_annotations(directory / ANNOTATION_FILE, meta, points)
    return directory


def read_sequence(directory) -> tuple[FrameSequence, PointAnnotationSet]:
    directory = Path(directory)
    meta, points = load_annotations((directory / ANNOTATION_FILE).read_bytes())
    frames = []
    for idx in meta.frame_indices:
        path = directory / frame_filename(idx)
        if not path.exists():
            raise FileNotFoundError(f"missing frame file {path}")
        frames.append(Frame(idx, read_ppm(path)))
    seq = FrameSequence(meta.sequence_id, meta.fps, frames, width=meta.width, height=meta.height)
    return seq, points


def write_manifest(root, sequence_ids, splits: dict[str, list[str]], extra: dict | None = None):
    doc = {"sequences": list(sequence_ids), "splits": {k: list(v) for k, v in splits.items()}}
    if extra:
        doc.update(extra)
    with open(Path(root) / MANIFEST_FILE, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST_FILE
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {os.fspath(path)}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def load_split(root, split: str) -> list[tuple[FrameSequence, PointAnnotationSet]]:
    manifest = read_manifest(root)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in manifest (have {sorted(manifest['splits'])})")
    return [read_sequence(Path(root) / sid) for sid in manifest["splits"][split]]
