"""Checkpoint container: a JSON header line followed by raw float64 tensors.

Layout::

    PPCKPT1\\n
    {"config": {...}, "tensors": [{"name": ..., "shape": [...]}, ...]}\\n
    <little-endian float64 bytes of each tensor, row-major, in header order>

Nothing time- or host-dependent is written, so equal models give equal bytes.
"""
from __future__ import annotations

import json

import numpy as np

from .model import Model, ModelConfig

MAGIC = b"PPCKPT1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: Model, path, extra=None) -> None:
    names = list(model.params)
    header = {
        "config": model.config.to_dict(),
        "tensors": [{"name": k, "shape": list(model.params[k].data.shape)} for k in names],
        "extra": extra or {},
    }
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for k in names:
            f.write(np.ascontiguousarray(model.params[k].data, dtype="<f8").tobytes())


def load_checkpoint(path, with_extra=False):
    with open(path, "rb") as f:
        if f.readline() != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint")
        header = json.loads(f.readline().decode("utf-8"))
        params = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise CheckpointError(f"{path}: truncated tensor {spec['name']}")
            params[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes")
    model = Model(ModelConfig(**header["config"]), params)
    if with_extra:
        return model, header.get("extra", {})
    return model
