"""``MUJICA1`` checkpoint archive.

Layout::

    8 bytes   magic b"MUJICA1\\0"
    8 bytes   little-endian uint64 header length N
    N bytes   UTF-8 JSON header {"config": ..., "meta": ..., "tensors": [...]}
    ...       tensor payload, raw little-endian float32, concatenated

Each tensor entry in the header carries ``name``, ``shape`` and the byte
``offset`` into the payload.  Files are written to a temporary sibling and
renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

__all__ = ["MAGIC", "CheckpointError", "save_checkpoint", "load_checkpoint"]

MAGIC = b"MUJICA1\0"


class CheckpointError(Exception):
    pass


def save_checkpoint(
    path: "str | os.PathLike",
    tensors: Mapping[str, torch.Tensor],
    config: dict,
    meta: "dict | None" = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "meta": meta or {}, "tensors": entries}).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: "str | os.PathLike") -> tuple[dict[str, torch.Tensor], dict, dict]:
    """Return ``(tensors, config, meta)``."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a MUJICA1 checkpoint")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n].decode("utf-8"))
    payload = memoryview(data)[16 + n:]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return tensors, header.get("config", {}), header.get("meta", {})
