"""Binary matrix files and atomic writes.

Layout of a matrix file::

    b"CKBA" | version u32 | rows u64 | cols u64 | rows*cols f64 (row-major)

All integers and floats are little-endian.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"CKBA"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
HEADER_SIZE = _HEADER.size  # 24


class MatrixFormatError(ValueError):
    pass


class BadMagicError(MatrixFormatError):
    pass


class BadVersionError(MatrixFormatError):
    pass


class TruncatedFileError(MatrixFormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def encode_matrix(a) -> bytes:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError("only 1-D or 2-D arrays can be stored")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    rows, cols = a.shape
    body = np.ascontiguousarray(a, dtype="<f8").tobytes()
    return _HEADER.pack(MAGIC, VERSION, rows, cols) + body


def decode_matrix(data: bytes) -> np.ndarray:
    if len(data) < HEADER_SIZE:
        raise TruncatedFileError(f"header needs {HEADER_SIZE} bytes, got {len(data)}")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    need = HEADER_SIZE + 8 * rows * cols
    if len(data) < need:
        raise TruncatedFileError(f"expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise MatrixFormatError(f"{len(data) - need} trailing bytes")
    body = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=HEADER_SIZE)
    return body.reshape(rows, cols).astype(float)


def write_matrix(path, a) -> None:
    atomic_write_bytes(path, encode_matrix(a))


def read_matrix(path) -> np.ndarray:
    return decode_matrix(Path(path).read_bytes())


def io_matrix(mode: str, path, matrix=None):
    """Read (``mode="r"``) or write (``mode="w"``) a matrix file."""
    if mode in ("r", "read"):
        return read_matrix(path)
    if mode in ("w", "write"):
        write_matrix(path, matrix)
        return np.asarray(matrix, dtype=float)
    raise ValueError(f"bad mode {mode!r}")


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
