"""Bit-exact tensor persistence in the minimal DOTT container.

Byte layout (all integers little-endian):

    offset  size          field
    0       4             magic b"DOTT"
    4       2             version (u16), currently 1
    6       1             dtype code (u8), 1 = float64 little-endian
    7       1             ndim (u8), >= 1
    8       8*ndim        dims (u64 each), all >= 1
    ...     8*prod(dims)  payload, row-major float64
    ...     to EOF        metadata, UTF-8 JSON object

Round-trips are bit-exact for every finite float64 payload including
signed zeros and denormals; the JSON trailer carries provenance
(scene, scan, seed, producer, units) verbatim.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DOTT"
VERSION = 1
DTYPE_F64 = 1


class TensorIoError(Exception):
    """Base error; `code` is a stable machine-readable identifier."""

    code = "io"


class BadMagicError(TensorIoError):
    code = "bad-magic"


class TruncatedError(TensorIoError):
    code = "truncated"


class UnsupportedVersionError(TensorIoError):
    code = "version-unsupported"


class BadDtypeError(TensorIoError):
    code = "bad-dtype"


class BadMetadataError(TensorIoError):
    code = "bad-metadata"


class NonFiniteError(TensorIoError):
    code = "non-finite"


def write_tensor(path, tensor, metadata=None, allow_non_finite: bool = False) -> None:
    """Write `tensor` (any shape, >= 1 element per axis) plus JSON metadata."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim < 1 or any(d < 1 for d in arr.shape):
        raise ValueError(f"tensor must have ndim >= 1 and no empty axes, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr)
    if not allow_non_finite and not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor contains non-finite values (pass allow_non_finite=True to write anyway)")
    meta = dict(metadata or {})
    meta_bytes = json.dumps(meta).encode("utf-8")
    header = MAGIC + struct.pack("<HBB", VERSION, DTYPE_F64, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = arr.astype("<f8", copy=False).tobytes()
    Path(path).write_bytes(header + dims + payload + meta_bytes)


def read_tensor(path):
    """Read a DOTT file; returns (tensor, metadata dict)."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise TruncatedError(f"file shorter than fixed header: {len(blob)} bytes")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {blob[:4]!r}")
    version, dtype_code, ndim = struct.unpack("<HBB", blob[4:8])
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} not supported (expected {VERSION})")
    if dtype_code != DTYPE_F64:
        raise BadDtypeError(f"dtype code {dtype_code} not supported")
    if ndim < 1:
        raise TruncatedError("ndim must be >= 1")
    dims_end = 8 + 8 * ndim
    if len(blob) < dims_end:
        raise TruncatedError("file ends inside the dims table")
    dims = struct.unpack(f"<{ndim}Q", blob[8:dims_end])
    if any(d < 1 for d in dims):
        raise TruncatedError(f"empty axis in dims {dims}")
    n_bytes = 8 * int(np.prod(dims, dtype=np.int64))
    payload_end = dims_end + n_bytes
    if len(blob) < payload_end:
        raise TruncatedError(f"payload needs {n_bytes} bytes, only {len(blob) - dims_end} present")
    arr = np.frombuffer(blob[dims_end:payload_end], dtype="<f8").reshape(dims).copy()
    trailer = blob[payload_end:]
    if trailer:
        try:
            meta = json.loads(trailer.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise BadMetadataError(f"metadata trailer is not valid JSON: {exc}") from exc
        if not isinstance(meta, dict):
            raise BadMetadataError("metadata trailer must be a JSON object")
    else:
        meta = {}
    return arr, meta
