"""BFCH binary container for draws of one tracked variable.

Layout (little-endian): a 64-byte header followed by ``count * prod(dims)``
float64 values in C order.

    offset  size  field
    0       4     magic b"BFCH"
    4       4     uint32 format version (1)
    8       4     uint32 number of per-draw dimensions (0..5)
    12      4     reserved (0)
    16      8     uint64 draw count
    24      40    uint64 dims, zero-padded to five slots
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"BFCH"
VERSION = 1
HEADER_SIZE = 64
MAX_DIMS = 5
_HEADER = struct.Struct("<4sIII Q 5Q")


class ContainerError(ValueError):
    pass


def _pack_header(count, dims):
    if len(dims) > MAX_DIMS:
        raise ContainerError(f"at most {MAX_DIMS} dimensions per draw")
    padded = tuple(dims) + (0,) * (MAX_DIMS - len(dims))
    return _HEADER.pack(MAGIC, VERSION, len(dims), 0, count, *padded)


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < HEADER_SIZE:
        raise ContainerError(f"{path}: truncated header")
    magic, version, ndim, _, count, *dims = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION or ndim > MAX_DIMS:
        raise ContainerError(f"{path}: unsupported version {version} / ndim {ndim}")
    return count, tuple(dims[:ndim])


def create(path, count, dims):
    """Create a zero-filled container and return a writable memmap onto it."""
    dims = tuple(int(d) for d in dims)
    with open(path, "wb") as fh:
        fh.write(_pack_header(count, dims))
        fh.truncate(HEADER_SIZE + 8 * count * int(np.prod(dims, dtype=np.int64)))
    if count == 0:
        return np.empty((0,) + dims)
    return np.memmap(path, dtype="<f8", mode="r+", offset=HEADER_SIZE, shape=(count,) + dims)


def write(path, draws):
    draws = np.asarray(draws, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_pack_header(draws.shape[0], draws.shape[1:]))
        fh.write(np.ascontiguousarray(draws).tobytes())


def read(path, mmap=True):
    count, dims = read_header(path)
    expected = HEADER_SIZE + 8 * count * int(np.prod(dims, dtype=np.int64))
    if os.path.getsize(path) < expected:
        raise ContainerError(f"{path}: file shorter than header claims")
    if count == 0:
        return np.empty((0,) + dims)
    if mmap:
        return np.memmap(path, dtype="<f8", mode="r", offset=HEADER_SIZE, shape=(count,) + dims)
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        return np.frombuffer(fh.read(expected - HEADER_SIZE), dtype="<f8").reshape((count,) + dims).copy()


def write_manifest(path, payload):
    payload = {"schema": 1, **payload}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("schema") != 1:
        raise ContainerError(f"{path}: unsupported manifest schema {payload.get('schema')!r}")
    return payload
