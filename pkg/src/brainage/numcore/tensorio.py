"""Tensor file format.

A file is one JSON header line ``{"shape": [...], "dtype": "f32"|"f64",
"byte_order": "LE"}`` terminated by ``\\n``, followed by the raw
little-endian row-major values.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from ..errors import ChecksumError, DataError

_DTYPES = {"f32": "<f4", "f64": "<f8"}


def encode_tensor(array, dtype: str = "f64") -> bytes:
    if dtype not in _DTYPES:
        raise DataError(f"unsupported tensor dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    arr = np.ascontiguousarray(np.asarray(array, dtype=_DTYPES[dtype]))
    header = json.dumps({"shape": list(arr.shape), "dtype": dtype, "byte_order": "LE"}, separators=(",", ":"))
    return header.encode() + b"\n" + arr.tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    nl = buf.find(b"\n")
    if nl < 0:
        raise ChecksumError(f"{source}: missing tensor header")
    try:
        header = json.loads(buf[:nl])
    except json.JSONDecodeError as exc:
        raise ChecksumError(f"{source}: corrupt tensor header ({exc})") from None
    dtype = header.get("dtype")
    if dtype not in _DTYPES or header.get("byte_order") != "LE":
        raise DataError(f"{source}: unsupported dtype/byte order {dtype!r}/{header.get('byte_order')!r}")
    shape = tuple(int(s) for s in header["shape"])
    payload = buf[nl + 1 :]
    expected = int(np.prod(shape, dtype=np.int64)) * np.dtype(_DTYPES[dtype]).itemsize
    if len(payload) != expected:
        raise ChecksumError(f"{source}: expected {expected} payload bytes for shape {shape}, found {len(payload)}")
    return np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape).astype(np.float64)


def write_tensor(path, array, dtype: str = "f64") -> str:
    """Write ``array`` to ``path`` and return the sha256 hex digest of the file."""
    blob = encode_tensor(array, dtype)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def read_tensor(path, sha256: str | None = None) -> np.ndarray:
    path = Path(path)
    blob = path.read_bytes()
    if sha256 is not None and hashlib.sha256(blob).hexdigest() != sha256:
        raise ChecksumError(f"{path}: sha256 mismatch")
    return decode_tensor(blob, str(path))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
