"""Versioned little-endian binary containers (TVLM / AMAP / CEMB / WSPN).

Every container starts with a 4-byte ASCII magic and a u16 version; payload
layout is per-format. All integers are unsigned little-endian, all floats
are f32 little-endian.
"""

from __future__ import annotations

import struct

import numpy as np


class FormatError(ValueError):
    """Bad magic, version, or payload in a binary container."""


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated container (wanted {n} bytes, got {len(buf)})")
    return buf


def write_header(fh, magic: bytes, version: int) -> None:
    assert len(magic) == 4
    fh.write(magic)
    fh.write(struct.pack("<H", version))


def read_header(fh, magic: bytes, version: int) -> None:
    got = _read_exact(fh, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (got_ver,) = struct.unpack("<H", _read_exact(fh, 2))
    if got_ver != version:
        raise FormatError(f"container version {got_ver} not supported (expected {version})")


def write_array_blob(path, magic: bytes, version: int, meta: list[int], arrays: list[np.ndarray]) -> None:
    """Generic parameter blob: meta ints, then shape-tagged f32 arrays."""
    with open(path, "wb") as fh:
        write_header(fh, magic, version)
        fh.write(struct.pack("<I", len(meta)))
        for v in meta:
            fh.write(struct.pack("<I", v))
        fh.write(struct.pack("<I", len(arrays)))
        for a in arrays:
            a = np.asarray(a, dtype=np.float64)
            fh.write(struct.pack("<I", a.ndim))
            for dim in a.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(a.astype("<f4").tobytes())


def read_array_blob(path, magic: bytes, version: int) -> tuple[list[int], list[np.ndarray]]:
    with open(path, "rb") as fh:
        read_header(fh, magic, version)
        (n_meta,) = struct.unpack("<I", _read_exact(fh, 4))
        meta = [struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(n_meta)]
        (n_arrays,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays = []
        for _ in range(n_arrays):
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
            arrays.append(data.reshape(shape).astype(np.float64))
        return meta, arrays


AMAP_MAGIC = b"AMAP"
AMAP_VERSION = 1


def write_amap(path, entries: list[tuple[int, np.ndarray]]) -> None:
    """AMAP container: per entry {u32 category_id, u32 h_f, u32 w_f, f32 grid}."""
    with open(path, "wb") as fh:
        write_header(fh, AMAP_MAGIC, AMAP_VERSION)
        fh.write(struct.pack("<I", len(entries)))
        for category_id, values in entries:
            v = np.asarray(values, dtype=np.float64)
            if v.ndim != 2:
                raise FormatError("activation grid must be 2-d")
            fh.write(struct.pack("<III", category_id, v.shape[0], v.shape[1]))
            fh.write(v.astype("<f4").tobytes())


def read_amap(path) -> list[tuple[int, np.ndarray]]:
    """Read and validate an AMAP container (finite, non-negative grids)."""
    with open(path, "rb") as fh:
        read_header(fh, AMAP_MAGIC, AMAP_VERSION)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = []
        for _ in range(count):
            category_id, h_f, w_f = struct.unpack("<III", _read_exact(fh, 12))
            if h_f < 1 or w_f < 1:
                raise FormatError(f"entry for category {category_id}: empty grid {h_f}x{w_f}")
            data = np.frombuffer(_read_exact(fh, 4 * h_f * w_f), dtype="<f4")
            grid = data.reshape(h_f, w_f).astype(np.float64)
            if not np.isfinite(grid).all():
                raise FormatError(f"entry for category {category_id}: non-finite values")
            if grid.min() < 0.0:
                raise FormatError(f"entry for category {category_id}: negative values")
            entries.append((int(category_id), grid))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last entry")
        return entries


CEMB_MAGIC = b"CEMB"
CEMB_VERSION = 1


def write_cemb(path, entries: list[tuple[int, np.ndarray]]) -> None:
    """CEMB container: per entry {u32 category_id, u32 d, f32 vector}."""
    with open(path, "wb") as fh:
        write_header(fh, CEMB_MAGIC, CEMB_VERSION)
        fh.write(struct.pack("<I", len(entries)))
        for category_id, vec in entries:
            v = np.asarray(vec, dtype=np.float64).reshape(-1)
            fh.write(struct.pack("<II", category_id, v.size))
            fh.write(v.astype("<f4").tobytes())


def read_cemb(path) -> list[tuple[int, np.ndarray]]:
    with open(path, "rb") as fh:
        read_header(fh, CEMB_MAGIC, CEMB_VERSION)
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        entries = []
        for _ in range(count):
            category_id, d = struct.unpack("<II", _read_exact(fh, 8))
            if d < 1:
                raise FormatError(f"entry for category {category_id}: empty vector")
            vec = np.frombuffer(_read_exact(fh, 4 * d), dtype="<f4").astype(np.float64)
            if not np.isfinite(vec).all():
                raise FormatError(f"entry for category {category_id}: non-finite values")
            entries.append((int(category_id), vec))
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after last entry")
        return entries
