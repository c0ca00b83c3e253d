"""
`atomic_io` holds the write path of every file the package produces (pack
members, checkpoints, reports, snapshots) and the raw float32 blob codec.

A file is staged next to its destination under a hidden name and moved into
place with `os.replace()`, so a pack or checkpoint on disk is either the old
one or the complete new one.  Operating-system failures surface as
`ArtifactIOError` naming the destination.  Blobs are little-endian float32,
row-major, without a header.

Key functions: `atomic_write_bytes`, `atomic_write_text`, `encode_f32`, `decode_f32`.
"""

from __future__ import annotations

import os
import secrets
from pathlib import Path

import numpy as np

from rest_adapt.errors import ArtifactIOError

F32_LE = np.dtype("<f4")


def _staging_path(path: Path) -> Path:
    return path.with_name(f".{path.name}.{secrets.token_hex(4)}.part")


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """
    Write `data` to `path` in one rename; parent directories are created.
    """
    path = Path(path)
    staged = _staging_path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        staged.write_bytes(data)
        os.replace(staged, path)
    except OSError as exc:
        staged.unlink(missing_ok=True)
        raise ArtifactIOError(f"Cannot write {path}: {exc.strerror or exc}", path=str(path)) from exc


def atomic_write_text(path: str | Path, content: str, encoding: str = "utf-8") -> None:
    atomic_write_bytes(path, content.encode(encoding))


def encode_f32(array: np.ndarray) -> bytes:
    """
    Serialize `array` as little-endian float32 in C (row-major) order.
    """
    return np.ascontiguousarray(array, dtype=F32_LE).tobytes(order="C")


def decode_f32(raw: bytes, shape: tuple[int, ...]) -> np.ndarray:
    """
    Decode a float32 blob into a native-endian float32 array of `shape`.

    Raises ValueError when the byte count does not match `shape`.
    """
    expected = int(np.prod(shape, dtype=np.int64)) * F32_LE.itemsize
    if len(raw) != expected:
        raise ValueError(f"expected {expected} bytes for shape {tuple(shape)}, got {len(raw)}")
    return np.frombuffer(raw, dtype=F32_LE).reshape(shape).astype(np.float32)
