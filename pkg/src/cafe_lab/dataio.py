"""IDX file ingestion and PNG grid export."""

import struct

import numpy as np
from PIL import Image

from .errors import FormatError, ShapeError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(path):
    """Read one big-endian IDX file.

    Image files (magic 0x803) come back as float arrays scaled to [0, 1],
    label files (magic 0x801) as integer vectors.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        if len(raw) < 16:
            raise FormatError(f"{path}: truncated IDX image header")
        count, rows, cols = struct.unpack(">III", raw[4:16])
        need = 16 + count * rows * cols
        if len(raw) < need:
            raise FormatError(
                f"{path}: expected {need} bytes for {count} images, got {len(raw)}")
        data = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols,
                             offset=16)
        return data.reshape(count, rows, cols).astype(float) / 255.0
    if magic == IDX_LABELS_MAGIC:
        if len(raw) < 8:
            raise FormatError(f"{path}: truncated IDX label header")
        count = struct.unpack(">I", raw[4:8])[0]
        if len(raw) < 8 + count:
            raise FormatError(f"{path}: expected {8 + count} bytes, got {len(raw)}")
        return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(int)
    raise FormatError(f"{path}: unknown IDX magic 0x{magic:08x}")


def load_idx_dataset(images_path, labels_path, take=None):
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise FormatError(f"{images_path}: not an IDX image file")
    if labels.ndim != 1:
        raise FormatError(f"{labels_path}: not an IDX label file")
    if images.shape[0] != labels.shape[0]:
        raise FormatError("image/label counts disagree")
    if take is not None:
        images, labels = images[:take], labels[:take]
    return images, labels


def quantize(images):
    return np.round(255.0 * np.clip(images, 0.0, 1.0)).astype(np.uint8)


def make_grid(images, cols):
    """Tile images row-major into one uint8 canvas."""
    images = np.asarray(images, dtype=float)
    if cols < 1:
        raise ShapeError("cols must be >= 1")
    if images.ndim not in (3, 4):
        raise ShapeError("expected (N, H, W) or (N, H, W, 3) images")
    n, h, w = images.shape[:3]
    rows = (n + cols - 1) // cols
    shape = (rows * h, cols * w) + images.shape[3:]
    canvas = np.zeros(shape, dtype=np.uint8)
    q = quantize(images)
    for idx in range(n):
        r, c = divmod(idx, cols)
        canvas[r * h:(r + 1) * h, c * w:(c + 1) * w] = q[idx]
    return canvas


def save_png_grid(images, cols, path):
    """Write an 8-bit grayscale or RGB PNG of the tiled images."""
    canvas = make_grid(images, cols)
    try:
        Image.fromarray(canvas).save(path, format="PNG")
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def load_png(path):
    try:
        with Image.open(path) as img:
            return np.asarray(img)
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
