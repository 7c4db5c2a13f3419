"""Block-grid partition of an image and region/block pixel overlap.

Blocks are numbered 1..K*K in row-major order.  Block (r, c) spans pixel
columns [floor(c*W/K), floor((c+1)*W/K)) and rows likewise, so the blocks
tile the image exactly even when K does not divide the image size.

The per-region loops live in a compiled kernel when it was built; set
``PFAN_PURE_PYTHON=1`` to force the pure-Python implementation.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, RejectedRegionError

if os.environ.get("PFAN_PURE_PYTHON"):
    from . import _geometry_py as _kernels
else:
    try:
        from . import _geometry_kernels as _kernels
    except ImportError:  # extension not compiled
        from . import _geometry_py as _kernels

BACKEND = "compiled" if _kernels.__name__.endswith("_geometry_kernels") else "python"


@dataclass(frozen=True)
class RegionBox:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class BlockGrid:
    width: int
    height: int
    k: int

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"grid needs K >= 1, got {self.k}")
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")

    @property
    def n_blocks(self):
        return self.k * self.k

    def block_bounds(self, q):
        """Pixel rectangle (x0, y0, x1, y1) of 1-based block ``q``."""
        self._check_index(q)
        r, c = divmod(q - 1, self.k)
        k, w, h = self.k, self.width, self.height
        return (c * w) // k, (r * h) // k, ((c + 1) * w) // k, ((r + 1) * h) // k

    def _check_index(self, q):
        if not 1 <= q <= self.n_blocks:
            raise IndexError(f"block index {q} outside [1, {self.n_blocks}]")


@dataclass(frozen=True)
class PositionIndexVector:
    """Top-L blocks of one region.

    ``indices`` are 1-based block numbers, ``counts`` the raw pixel overlaps
    and ``weights`` the overlaps divided by their sum.
    """

    indices: tuple
    counts: tuple
    weights: tuple


def clip_box(raw, width, height, region_id=None):
    """Round a real-valued box outward to whole pixels and clip it to the image."""
    x0, y0, x1, y1 = (float(v) for v in raw)
    if not all(math.isfinite(v) for v in (x0, y0, x1, y1)):
        raise RejectedRegionError(region_id, "non-finite coordinates")
    box = RegionBox(
        max(0, math.floor(x0)),
        max(0, math.floor(y0)),
        min(int(width), math.ceil(x1)),
        min(int(height), math.ceil(y1)),
    )
    if box.x1 <= box.x0 or box.y1 <= box.y0:
        raise RejectedRegionError(region_id)
    return box


def overlap(box, grid, q):
    """Number of pixels shared by ``box`` and block ``q``."""
    grid._check_index(q)
    bx0, by0, bx1, by1 = grid.block_bounds(q)
    w = min(box.x1, bx1) - max(box.x0, bx0)
    h = min(box.y1, by1) - max(box.y0, by0)
    return w * h if w > 0 and h > 0 else 0


def overlap_counts(boxes, grid):
    """(n, K*K) overlap table for a sequence of boxes."""
    arr = np.array([b.as_tuple() if isinstance(b, RegionBox) else tuple(b) for b in boxes],
                   dtype=np.int64).reshape(-1, 4)
    return _kernels.overlap_counts(arr, grid.width, grid.height, grid.k)


def select_blocks(counts, l):
    """0-based top-``l`` block indices and L1-normalised overlaps for each row of ``counts``."""
    counts = np.asarray(counts, dtype=np.int64)
    if not 1 <= l <= counts.shape[1]:
        raise ConfigError(f"L={l} outside [1, {counts.shape[1]}]")
    idx = _kernels.select_top(counts, l)
    picked = np.take_along_axis(counts, idx, axis=1)
    totals = picked.sum(axis=1, keepdims=True)
    if np.any(totals == 0):
        raise DimensionError("region has no overlap with any selected block")
    return idx, picked, picked / totals


def top_l_blocks(box, grid, l):
    idx, picked, weights = select_blocks(overlap_counts([box], grid), l)
    return PositionIndexVector(
        tuple(int(q) + 1 for q in idx[0]),
        tuple(int(c) for c in picked[0]),
        tuple(float(a) for a in weights[0]),
    )


def encode_regions(boxes, grid, l):
    """Batch form of :func:`top_l_blocks`: (0-based indices, weights), both (n, l)."""
    idx, _, weights = select_blocks(overlap_counts(boxes, grid), l)
    return idx, weights
