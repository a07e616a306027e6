"""Tensor files, PGM export and JSON sidecars.

Tensor file layout (little-endian)::

    b"XTNS" | version u8 = 1 | dtype u8 (1 = f32, 2 = f64) | ndim u8
    | ndim x u32 dims | row-major payload
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .errors import TensorFormatError

MAGIC = b"XTNS"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
MAX_ELEMENTS = 1 << 31


def encode_tensor(tensor, dtype: str = "f64") -> bytes:
    arr = np.asarray(tensor)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim > 255:
        raise TensorFormatError("too many dims")
    code = {"f32": 1, "f64": 2}[dtype]
    payload = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def decode_tensor(data: bytes) -> np.ndarray:
    """Parse tensor-file bytes. ``f32`` payloads are widened to ``float64``."""
    if len(data) < 7 or data[:4] != MAGIC:
        raise TensorFormatError("bad magic")
    version, code, ndim = struct.unpack_from("<BBB", data, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if len(data) < 7 + 4 * ndim:
        raise TensorFormatError("truncated header")
    dims = struct.unpack_from(f"<{ndim}I", data, 7)
    count = math.prod(dims)
    if count > MAX_ELEMENTS:
        raise TensorFormatError("dims overflow")
    dtype = DTYPES[code]
    start = 7 + 4 * ndim
    size = len(data) - start
    if size < count * dtype.itemsize:
        raise TensorFormatError("truncated payload")
    if size > count * dtype.itemsize:
        raise TensorFormatError("trailing bytes after payload")
    return np.frombuffer(data, dtype=dtype, count=count, offset=start).astype(np.float64).reshape(dims)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_tensor(path, tensor, dtype: str = "f64") -> None:
    Path(path).write_bytes(encode_tensor(tensor, dtype))


def _round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def pgm_pixels(values) -> np.ndarray:
    """Min-max scale to 0..255; constant input maps to 127.

    Images ``(C, H, W)`` are averaged over channels; vectors become one row.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 3:
        v = v.mean(axis=0)
    elif v.ndim == 1:
        v = v[None, :]
    elif v.ndim != 2:
        raise ValueError(f"cannot render a {v.ndim}-d array as PGM")
    lo, hi = float(v.min()), float(v.max())
    if hi - lo <= 0.0:
        return np.full(v.shape, 127, dtype=np.uint8)
    return _round_half_away(255.0 * (v - lo) / (hi - lo)).astype(np.uint8)


def export_pgm(values, path) -> None:
    """Write a binary (P5) greyscale PGM with maxval 255."""
    pix = pgm_pixels(getattr(values, "values", values))
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(data[-w * h :], dtype=np.uint8).reshape(h, w)


def sidecar_path(out_path) -> Path:
    return Path(str(out_path) + ".json")


def write_sidecar(out_path, record: dict) -> Path:
    path = sidecar_path(out_path)
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_sidecar(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))
