"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"VIDCKPT1"
    header     u32 length + UTF-8 JSON (model config and free-form metadata)
    count      u32 number of entries
    entry      u32 name length, name, u32 ndim, ndim x u64 dims, float64 values

Entries are written in sorted name order so equal parameters give equal bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Tensor
from .model import ModelConfig, ModelParams, init_params

MAGIC = b"VIDCKPT1"


class CheckpointError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], header: dict) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.array(arrays[name], dtype="<f8", order="C")  # keeps 0-d shape
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    header = json.loads(take(hlen).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last entry")
    return arrays, header


def save_checkpoint(path, params: ModelParams, extra_arrays: dict | None = None,
                    meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in params.arrays().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = v
    header = {"model_config": params.config.to_dict(), "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, header))


def load_checkpoint(path) -> tuple[ModelParams, dict[str, np.ndarray], dict]:
    """Returns (params, non-parameter arrays, metadata); every expected
    parameter name and shape is verified against the recorded config."""
    with open(path, "rb") as fh:
        arrays, header = loads(fh.read())
    config = ModelConfig.from_dict(header["model_config"])
    template = init_params(config, seed=0)
    tensors = {}
    for name in template.names():
        key = f"param/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        if arrays[key].shape != template[name].shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arrays[key].shape}, expected {template[name].shape}")
        tensors[name] = Tensor(arrays[key], requires_grad=True, name=name)
    unexpected = [k for k in arrays if k.startswith("param/") and k[6:] not in tensors]
    if unexpected:
        raise CheckpointError(f"unexpected parameters in checkpoint: {unexpected}")
    extra = {k: v for k, v in arrays.items() if not k.startswith("param/")}
    return ModelParams(config, tensors), extra, header.get("meta", {})
