"""Voxel-grid construction from event streams.

Events are binned onto a B*H*W grid with a triangular kernel: an event at
scaled time s = (t - t_start)/(t_end - t_start) * (B - 1) contributes
p * max(0, 1 - |b - s|) to bin b, so each interior event splits between
at most two adjacent bins with weights summing to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventStream


@dataclass
class VoxelGrid:
    """B*H*W accumulation of events over a time window (microseconds)."""

    data: np.ndarray
    t_start: int
    t_end: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("voxel data must be B*H*W")
        if self.t_end <= self.t_start:
            raise ValueError("voxel window must satisfy t_start < t_end")
        if not np.isfinite(self.data).all():
            raise ValueError("voxel data must be finite")

    @property
    def bins(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


def voxelize(stream: EventStream, bins, t_start, t_end) -> VoxelGrid:
    """Accumulate a stream into a voxel grid over [t_start, t_end]."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if t_end <= t_start:
        raise ValueError("voxel window must satisfy t_start < t_end")
    data = np.zeros((bins, stream.height, stream.width))
    if len(stream) == 0:
        return VoxelGrid(data, t_start, t_end)
    ts = stream.ts
    if ts[0] < t_start or ts[-1] > t_end:
        raise ValueError("events outside the voxel window")
    scaled = (ts - t_start) / float(t_end - t_start) * (bins - 1)
    b0 = np.floor(scaled).astype(np.int64)
    frac = scaled - b0
    ps = stream.ps.astype(np.float64)
    flat = data.reshape(bins, -1)
    pix = stream.ys * stream.width + stream.xs
    lo_ok = (b0 >= 0) & (b0 < bins)
    np.add.at(flat, (b0[lo_ok], pix[lo_ok]), (ps * (1.0 - frac))[lo_ok])
    hi_ok = (b0 + 1 < bins) & (frac > 0)
    np.add.at(flat, (b0[hi_ok] + 1, pix[hi_ok]), (ps * frac)[hi_ok])
    return VoxelGrid(data, t_start, t_end)


def znorm(grid: VoxelGrid, eps=1e-8) -> VoxelGrid:
    """Z-score over all grid entries (population std, guarded near zero)."""
    v = grid.data
    out = (v - v.mean()) / max(float(v.std()), eps)
    return VoxelGrid(out, grid.t_start, grid.t_end)


def downsample_voxel(grid: VoxelGrid, factor) -> VoxelGrid:
    """Average pooling per bin with kernel = stride = factor."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return VoxelGrid(grid.data.copy(), grid.t_start, grid.t_end)
    b, h, w = grid.data.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {h}x{w}")
    pooled = grid.data.reshape(b, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return VoxelGrid(pooled, grid.t_start, grid.t_end)


@dataclass
class ReferencePointSet:
    """Integer (y, x) anchor locations at one feature scale."""

    ys: np.ndarray
    xs: np.ndarray
    scale: int
    height: int
    width: int

    def __len__(self):
        return len(self.ys)

    def as_array(self):
        return np.stack([self.ys, self.xs], axis=1)


def extract_reference_points(grid: VoxelGrid, scale=1) -> ReferencePointSet:
    """Pixels whose summed absolute bin mass is nonzero, row-major order."""
    mass = np.abs(grid.data).sum(axis=0)
    ys, xs = np.nonzero(mass > 0)
    return ReferencePointSet(ys.astype(np.int64), xs.astype(np.int64),
                             scale, grid.height, grid.width)
