"""Reader for IDX image/label files with optional average-pool downsampling."""

from __future__ import annotations

import gzip
import struct

import numpy as np

from .network import LabeledDataset

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def _open(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    return gzip.open(path, "rb") if head == b"\x1f\x8b" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Unsigned-byte IDX array with its header shape (gzip input is detected)."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: only unsigned-byte payloads are supported")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    shape = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(shape))
    if len(raw) - header != count:
        raise IdxFormatError(f"{path}: payload has {len(raw) - header} bytes, header implies {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(shape)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", 0x0800 | array.ndim))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def average_pool(images: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping ``factor x factor`` mean pooling of ``(n, rows, cols)`` images."""
    if factor < 1:
        raise ValueError("pooling factor must be positive")
    n, rows, cols = images.shape
    if rows % factor or cols % factor:
        raise ValueError(f"image size {rows}x{cols} is not divisible by {factor}")
    return images.reshape(n, rows // factor, factor, cols // factor, factor).mean(axis=(2, 4))


def load_idx_dataset(images_path, labels_path, pool: int = 1, limit: int | None = None,
                     fractions=(0.7, 0.15, 0.15), seed=0) -> LabeledDataset:
    """Flattened ``[0, 1]`` pixel features and integer labels split by ``fractions``."""
    images = read_idx(images_path, IMAGES_MAGIC).astype(np.float64) / 255.0
    labels = read_idx(labels_path, LABELS_MAGIC).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError("image and label counts differ")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if pool > 1:
        images = average_pool(images, pool)
    return LabeledDataset.from_fractions(images.reshape(images.shape[0], -1), labels, fractions, seed)
