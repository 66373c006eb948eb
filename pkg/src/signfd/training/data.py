"""IID sharding, mini-batch gradients and IDX file ingestion."""

from __future__ import annotations

import os
import struct

import numpy as np

from ..core import RngStream

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}


class IdxFormatError(ValueError):
    pass


def partition_iid(num_samples: int, num_workers: int, rng: RngStream) -> list[np.ndarray]:
    """Randomly split ``range(num_samples)`` into ``num_workers`` disjoint shards.

    Shard sizes differ by at most one; earlier shards get the extra samples.
    """
    if num_samples < 1:
        raise ValueError("cannot partition an empty dataset")
    if num_workers < 1:
        raise ValueError("need at least one worker")
    if num_samples < num_workers:
        raise ValueError(f"{num_samples} samples cannot fill {num_workers} shards")
    order = rng.child(purpose="partition").generator().permutation(num_samples)
    return [np.sort(s) for s in np.array_split(order, num_workers)]


def local_gradient(task, shard: np.ndarray, x: np.ndarray, batch_size: int | None,
                   rng: RngStream) -> np.ndarray:
    """Mean gradient over a uniformly drawn mini-batch of ``shard``.

    ``batch_size`` equal to the shard size (or ``None``) uses the whole shard.
    """
    if batch_size is None or batch_size == len(shard):
        idx = shard
    elif 1 <= batch_size < len(shard):
        idx = rng.generator().choice(shard, size=batch_size, replace=False)
    else:
        raise ValueError(f"batch size {batch_size} invalid for shard of {len(shard)} samples")
    g = task.gradient(x, idx)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite local gradient")
    return g


def load_idx(path) -> np.ndarray:
    """Read an IDX file.

    Unsigned-byte tensors of rank >= 2 are returned as float images scaled to
    ``[0, 1]`` and flattened to ``(count, pixels)``; rank-1 integer files as
    ``int64`` labels; anything else as a float array of the stored shape.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: file too short for an IDX header ({len(data)} bytes)")
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08X}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: truncated header, expected {header} bytes, got {len(data)}")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_TYPES[code]
    expected = header + int(np.prod(shape)) * dtype.itemsize
    if len(data) != expected:
        raise IdxFormatError(
            f"{path}: expected {expected} bytes for shape {shape}, got {len(data)}"
        )
    arr = np.frombuffer(data, dtype=dtype, offset=header).reshape(shape)
    if ndim == 1 and dtype.kind in "iu":
        return arr.astype(np.int64)
    if code == 0x08 and ndim >= 2:
        return arr.reshape(shape[0], -1).astype(np.float64) / 255.0
    return arr.astype(np.float64)


def write_idx(path, array) -> None:
    """Write ``array`` in IDX format using its dtype (must be an IDX-supported type)."""
    arr = np.asarray(array)
    code = _IDX_CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype(_IDX_TYPES[code]).tobytes())
    os.replace(tmp, path)


def load_idx_pair(images_path, labels_path):
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1:
        raise IdxFormatError(f"{labels_path}: labels must be rank 1, got shape {labels.shape}")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"dimension mismatch: {images.shape[0]} images vs {labels.shape[0]} labels"
        )
    return images, labels
