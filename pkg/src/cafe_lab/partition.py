"""Vertical feature partitions: which worker holds which slice of each sample.

Two schemes:

* ``even``  — the flattened feature vector is cut into M contiguous ranges;
  concatenating the slices reproduces the flattened sample exactly.
* ``blocks`` — the 2-D image is cut into rectangular tiles (M = 1 whole,
  M = 2 left/right halves, M = 4 quadrants), so each worker holds a small
  image a convolutional extractor can run on.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ConfigError


@dataclass(frozen=True)
class FeatureBlock:
    kind: str                 # "flat" | "block"
    start: int = 0            # flat range [start, stop)
    stop: int = 0
    rows: tuple = (0, 0)      # block row/col ranges
    cols: tuple = (0, 0)

    @property
    def shape(self):
        if self.kind == "flat":
            return (self.stop - self.start,)
        return (self.rows[1] - self.rows[0], self.cols[1] - self.cols[0])


@dataclass(frozen=True)
class Partition:
    full_shape: tuple         # per-sample feature shape, e.g. (8, 8)
    blocks: tuple             # one FeatureBlock per worker

    @property
    def n_workers(self):
        return len(self.blocks)

    def split(self, x):
        """Split a batch ``(B, *full_shape)`` into per-worker slices."""
        if x.shape[1:] != self.full_shape:
            raise ShapeError(
                f"sample shape {x.shape[1:]} does not match partition layout "
                f"{self.full_shape}")
        out = []
        flat = x.reshape(x.shape[0], -1)
        for blk in self.blocks:
            if blk.kind == "flat":
                out.append(flat[:, blk.start:blk.stop])
            else:
                out.append(x[:, blk.rows[0]:blk.rows[1], blk.cols[0]:blk.cols[1]])
        return out

    def reassemble(self, slices):
        """Inverse of :meth:`split`; returns a batch ``(B, *full_shape)``."""
        b = slices[0].shape[0]
        x = np.zeros((b,) + self.full_shape)
        flat = x.reshape(b, -1)
        for blk, part in zip(self.blocks, slices):
            if blk.kind == "flat":
                flat[:, blk.start:blk.stop] = part.reshape(b, -1)
            else:
                x[:, blk.rows[0]:blk.rows[1], blk.cols[0]:blk.cols[1]] = part
        return x


def make_partition(full_shape, n_workers, scheme="even"):
    feature_dim = int(np.prod(full_shape))
    if n_workers < 1:
        raise ConfigError("need at least one worker")
    if n_workers > feature_dim:
        raise ConfigError(
            f"cannot split {feature_dim} features across {n_workers} workers")
    if scheme == "even":
        bounds = np.linspace(0, feature_dim, n_workers + 1).astype(int)
        blocks = tuple(
            FeatureBlock("flat", start=int(a), stop=int(b))
            for a, b in zip(bounds[:-1], bounds[1:]))
        return Partition(tuple(full_shape), blocks)
    if scheme == "blocks":
        if len(full_shape) != 2:
            raise ConfigError("blocks scheme needs 2-D samples")
        h, w = full_shape
        if n_workers == 1:
            grid = [(0, h, 0, w)]
        elif n_workers == 2:
            if w % 2:
                raise ConfigError("blocks scheme with 2 workers needs even width")
            grid = [(0, h, 0, w // 2), (0, h, w // 2, w)]
        elif n_workers == 4:
            if h % 2 or w % 2:
                raise ConfigError("blocks scheme with 4 workers needs even sides")
            grid = [(0, h // 2, 0, w // 2), (0, h // 2, w // 2, w),
                    (h // 2, h, 0, w // 2), (h // 2, h, w // 2, w)]
        else:
            raise ConfigError("blocks scheme supports 1, 2 or 4 workers")
        blocks = tuple(
            FeatureBlock("block", rows=(r0, r1), cols=(c0, c1))
            for r0, r1, c0, c1 in grid)
        return Partition(tuple(full_shape), blocks)
    raise ConfigError(f"unknown partition scheme {scheme!r}")
