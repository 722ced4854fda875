"""Per-tensor binary checkpoint files plus a JSON index.

File layout (little-endian)::

    b"SLMF" | version:u32 | rank:u32 | dims:u64 * rank | dtype:u32 | payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import Tensor

MAGIC = b"SLMF"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_TAGS = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(ValueError):
    pass


def write_tensor(path: Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    tag = _TAGS.get(arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) + struct.pack("<I", tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(_DTYPES[tag], copy=False).tobytes())


def read_tensor(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 12
    dims = struct.unpack_from(f"<{rank}Q", raw, off)
    off += 8 * rank
    (tag,) = struct.unpack_from("<I", raw, off)
    off += 4
    if tag not in _DTYPES:
        raise CheckpointError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    count = int(np.prod(dims)) if rank else 1
    payload = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    return payload.reshape(dims).astype(dt.newbyteorder("="))


def save_checkpoint(directory: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(params):
        value = params[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        fname = name.replace("/", "__") + ".slmf"
        write_tensor(d / fname, arr)
        index[name] = fname
    (d / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))
    return d


def load_checkpoint(directory: str | Path) -> dict[str, np.ndarray]:
    d = Path(directory)
    index = json.loads((d / "index.json").read_text())
    return {name: read_tensor(d / fname) for name, fname in index.items()}
