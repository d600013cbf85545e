"""Shared binary checkpoint format ("BZMM").

Layout, all integers little-endian:

    magic   4 bytes  b"BZMM"
    version u32      currently 1
    count   u32      number of tensors
    entry*  u32 name-length, UTF-8 name, u32 rows, u32 cols,
            u8 frozen marker, rows*cols float64 row-major

No timestamps or other non-deterministic content; identical tensors give
byte-identical files.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BZMM"
VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint"]


def save_checkpoint(path, tensors: dict[str, np.ndarray], frozen: bool | dict[str, bool] = False) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype=np.float64)
            if a.ndim != 2:
                raise ValueError(f"checkpoint tensors must be 2-D, got {a.ndim}-D for {name!r}")
            flag = frozen[name] if isinstance(frozen, dict) else frozen
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<IIB", a.shape[0], a.shape[1], 1 if flag else 0))
            fh.write(a.astype("<f8").tobytes(order="C"))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, bool]]:
    """Returns (tensors, frozen flags); frozen tensors are loaded read-only."""
    tensors: dict[str, np.ndarray] = {}
    flags: dict[str, bool] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a BZMM checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<I", fh.read(4))
            name = fh.read(nlen).decode("utf-8")
            rows, cols, flag = struct.unpack("<IIB", fh.read(9))
            data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
            arr = data.astype(np.float64).copy()
            if flag:
                arr.flags.writeable = False
            tensors[name] = arr
            flags[name] = bool(flag)
    return tensors, flags
