"""Flat binary checkpoints.

Layout: magic bytes ``ACE1``, a little-endian uint32 record count, then one
record per array: uint32 name length, UTF-8 name, uint32 rank, uint32 extents,
and the values as little-endian 64-bit floats in C order.  Model parameters
and batch-norm running statistics come first, optimizer state (``adam.*``)
and run metadata (``meta.*``) follow in the same layout.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"ACE1"


class CheckpointFormatError(ValueError):
    pass


def write_arrays(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.astype("<f8").tobytes(order="C"))


def read_arrays(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic in {path}: {blob[:4]!r}")
    offset = 4
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset : offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).astype(np.float64)
        offset += 8 * n
        arrays[name] = values.reshape(shape) if rank else values.reshape(())
    if offset != len(blob):
        raise CheckpointFormatError(f"trailing bytes in checkpoint {path}")
    return arrays


def split_sections(arrays: dict[str, np.ndarray]):
    """Partition loaded records into (model state, adam state, metadata)."""
    model: dict[str, np.ndarray] = {}
    adam: dict[str, np.ndarray] = {}
    meta: dict[str, np.ndarray] = {}
    for name, arr in arrays.items():
        if name.startswith("adam."):
            adam[name] = arr
        elif name.startswith("meta."):
            meta[name[len("meta.") :]] = arr
        else:
            model[name] = arr
    return model, adam, meta
