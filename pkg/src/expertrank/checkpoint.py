"""Binary parameter checkpoints.

Single-file format, little-endian throughout:

    magic   b"XRKP"
    version u32       (currently 1)
    count   u32
    then per record:
        name_len u16, name utf-8 bytes
        dtype    u8   (4 = float32, 8 = float64)
        ndim     u8
        dims     u32 * ndim
        data     raw row-major values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor

MAGIC = b"XRKP"
VERSION = 1

_DTYPE_CODES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}
_CODE_FOR = {np.dtype("float32"): 4, np.dtype("float64"): 8}


class CheckpointError(IOError):
    """Malformed or unreadable checkpoint file."""


def save_params(path, params: dict[str, Tensor]) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(params)))
        for name, p in params.items():
            raw = name.encode("utf-8")
            code = _CODE_FOR[np.dtype(p.dtype)]
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype=_DTYPE_CODES[code]).tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a checkpoint back as plain arrays (native byte order)."""
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            code, ndim = struct.unpack("<BB", fh.read(2))
            if code not in _DTYPE_CODES:
                raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
            dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dt = _DTYPE_CODES[code]
            n_bytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
            buf = fh.read(n_bytes)
            if len(buf) != n_bytes:
                raise CheckpointError(f"{path}: truncated data for {name}")
            out[name] = np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return out


def load_params(path, dtype=None, trainable: bool = True) -> dict[str, Tensor]:
    """Read a checkpoint as Tensors, optionally casting (e.g. float64 for
    gradient-check runs)."""
    arrays = load_arrays(path)
    out: dict[str, Tensor] = {}
    for name, arr in arrays.items():
        if dtype is not None:
            arr = arr.astype(dtype)
        out[name] = Tensor(arr, requires_grad=trainable)
    return out
