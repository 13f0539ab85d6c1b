"""Binary cube/matrix/checkpoint/library files and CSV tables.

All binary formats are little-endian.

* cube: ``b"HCUB"``, version u32, ``P, N1, N2`` u32, then ``P*N1*N2``
  float64 values, band-major and row-major within a band.
* matrix: ``b"HMAT"``, ``rows, cols`` u32, then float64 values row-major.
* checkpoint: ``b"HCKP"``, version u32, entry count u32, then per entry a
  u32 name length, the UTF-8 name, u32 ndim, ndim u32 dims and float64
  values in C order.
* signature library: ``P, M`` u32, then ``P*M`` float64 values stored
  column by column (one signature after another).
"""

from __future__ import annotations

import csv
import math
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .hsi import HsiCube

__all__ = [
    "FormatError",
    "write_cube",
    "read_cube",
    "write_matrix",
    "read_matrix",
    "write_checkpoint",
    "read_checkpoint",
    "write_library",
    "read_library",
    "write_csv",
    "read_csv",
]

CUBE_MAGIC = b"HCUB"
MAT_MAGIC = b"HMAT"
CKPT_MAGIC = b"HCKP"
VERSION = 1
F8 = np.dtype("<f8")


class FormatError(ValueError):
    pass


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _floats(f, count: int, what: str) -> np.ndarray:
    return np.frombuffer(_read_exact(f, count * 8, what), dtype=F8).astype(np.float64)


def _magic(f, magic: bytes, path) -> None:
    got = f.read(4)
    if got != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {got!r}")


def write_cube(path, cube: HsiCube) -> None:
    P, H, W = cube.data.shape
    with open(path, "wb") as f:
        f.write(CUBE_MAGIC + struct.pack("<IIII", VERSION, P, H, W))
        f.write(np.ascontiguousarray(cube.data, dtype=F8).tobytes())


def read_cube(path) -> HsiCube:
    with open(path, "rb") as f:
        _magic(f, CUBE_MAGIC, path)
        version, P, H, W = struct.unpack("<IIII", _read_exact(f, 16, "cube header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported cube version {version}")
        data = _floats(f, P * H * W, "cube data")
    return HsiCube(data.reshape(P, H, W))


def write_matrix(path, M) -> None:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError(f"matrix files hold 2-D arrays, got shape {M.shape}")
    with open(path, "wb") as f:
        f.write(MAT_MAGIC + struct.pack("<II", *M.shape))
        f.write(np.ascontiguousarray(M, dtype=F8).tobytes())


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        _magic(f, MAT_MAGIC, path)
        rows, cols = struct.unpack("<II", _read_exact(f, 8, "matrix header"))
        return _floats(f, rows * cols, "matrix data").reshape(rows, cols)


def write_checkpoint(path, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", VERSION, len(arrays)))
        for name, a in arrays.items():
            a = np.asarray(a, dtype=np.float64)
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)) + raw)
            f.write(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
            f.write(np.ascontiguousarray(a, dtype=F8).tobytes())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        _magic(f, CKPT_MAGIC, path)
        version, count = struct.unpack("<II", _read_exact(f, 8, "checkpoint header"))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4, "entry name length"))
            name = _read_exact(f, n, "entry name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(f, 4, "entry rank"))
            shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim, "entry shape"))
            out[name] = _floats(f, math.prod(shape), name).reshape(shape)
    return out


def write_library(path, signatures) -> None:
    S = np.asarray(signatures, dtype=np.float64)
    if S.ndim != 2:
        raise ValueError("a signature library is a (P, M) matrix")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", *S.shape))
        f.write(np.ascontiguousarray(S.T, dtype=F8).tobytes())


def read_library(path) -> np.ndarray:
    """Load a ``(P, M)`` signature matrix from a library file."""
    if not path or not os.path.exists(path):
        raise FileNotFoundError(f"signature library not found: {path!r}")
    with open(path, "rb") as f:
        P, M = struct.unpack("<II", _read_exact(f, 8, "library header"))
        data = _floats(f, P * M, "library data")
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after {P}x{M} library")
    return data.reshape(M, P).T.copy()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, rows: Iterable[dict], fields: Iterable[str] | None = None) -> None:
    rows = list(rows)
    if fields is None:
        fields = []
        for r in rows:
            fields.extend(k for k in r if k not in fields)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=list(fields), extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: _fmt(v) for k, v in r.items()})


def read_csv(path) -> list[dict]:
    """Rows as dicts; numeric-looking cells are converted to float."""
    out = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            row = {}
            for k, v in r.items():
                try:
                    row[k] = float(v)
                except (TypeError, ValueError):
                    row[k] = v
            out.append(row)
    return out
