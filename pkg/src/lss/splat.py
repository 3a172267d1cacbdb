"""Splat frustum features into a bird's-eye-view pillar grid.

The pooling kernel sorts points by pillar id, takes a cumulative sum over the
sorted features, and subtracts the values at segment boundaries. Its backward
pass is analytic: the gradient of a point is just the upstream gradient of its
pillar, zero for points that fell outside the grid. A reference path builds
the same computation out of primitive autodiff ops so its backward runs
through the engine instead; it exists as a correctness oracle and a timing
baseline for the hand-derived backward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import Tensor

SENTINEL = -1


@dataclass(frozen=True)
class BevGridSpec:
    x_min: float
    x_max: float
    y_min: float
    y_max: float
    cell: float

    def __post_init__(self):
        for lo, hi, name in ((self.x_min, self.x_max, "x"), (self.y_min, self.y_max, "y")):
            n = (hi - lo) / self.cell
            if hi <= lo or self.cell <= 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"{name} extent [{lo}, {hi}] is not a positive integer number of {self.cell} m cells")

    @property
    def nx(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def ny(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))


@dataclass(frozen=True)
class BinAssignment:
    """Stable point-to-pillar assignment shared by both pooling paths."""

    bin_ids: np.ndarray      # (P,) int64 flattened batch*X*Y index, SENTINEL outside the grid
    order: np.ndarray        # (P,) stable argsort of bin_ids (sentinels first)
    valid_start: int         # offset in `order` where in-grid points begin
    seg_ends: np.ndarray     # (S,) exclusive end offsets of each segment in the sorted valid region
    seg_bins: np.ndarray     # (S,) pillar id of each segment
    num_bins: int
    batch: int


@dataclass
class BevTensor:
    values: Tensor           # (B, C, X, Y)
    spec: BevGridSpec


def assign_bins(coords: np.ndarray, spec: BevGridSpec, batch_index=None, batch: int = 1,
                z_min: float | None = None, z_max: float | None = None) -> BinAssignment:
    """Map ego xyz points to flattened pillar ids.

    z is ignored (pillars have infinite height) unless an explicit z clip is
    given. Points landing outside [x_min, x_max) x [y_min, y_max) get SENTINEL.
    """
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be (P, 3), got {coords.shape}")
    if not np.isfinite(coords).all():
        raise ValueError("non-finite point coordinates")
    nx, ny = spec.nx, spec.ny
    ix = np.floor((coords[:, 0] - spec.x_min) / spec.cell).astype(np.int64)
    iy = np.floor((coords[:, 1] - spec.y_min) / spec.cell).astype(np.int64)
    valid = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    if z_min is not None:
        valid &= coords[:, 2] >= z_min
    if z_max is not None:
        valid &= coords[:, 2] < z_max
    if batch_index is None:
        b = np.zeros(coords.shape[0], dtype=np.int64)
    else:
        b = np.asarray(batch_index, dtype=np.int64)
        if b.shape != (coords.shape[0],):
            raise ValueError(f"batch_index shape {b.shape} vs {coords.shape[0]} points")
        if b.size and (b.min() < 0 or b.max() >= batch):
            raise ValueError("batch_index out of range")
    bin_ids = np.where(valid, (b * nx + ix) * ny + iy, SENTINEL)
    order = np.argsort(bin_ids, kind="stable")
    valid_start = int(np.searchsorted(bin_ids[order], 0))
    sorted_valid = bin_ids[order][valid_start:]
    if sorted_valid.size:
        change = np.nonzero(np.diff(sorted_valid))[0]
        seg_ends = np.concatenate([change + 1, [sorted_valid.size]]).astype(np.int64)
        seg_bins = sorted_valid[seg_ends - 1]
    else:
        seg_ends = np.zeros(0, dtype=np.int64)
        seg_bins = np.zeros(0, dtype=np.int64)
    return BinAssignment(bin_ids=bin_ids, order=order, valid_start=valid_start,
                         seg_ends=seg_ends, seg_bins=seg_bins,
                         num_bins=batch * nx * ny, batch=batch)


def _check_pool_args(features: Tensor, bins: BinAssignment, spec: BevGridSpec, batch: int):
    if features.data.ndim != 2:
        raise ValueError(f"features must be (P, C), got {features.data.shape}")
    if features.data.shape[0] != bins.bin_ids.shape[0]:
        raise ValueError(f"{features.data.shape[0]} features vs {bins.bin_ids.shape[0]} assigned points")
    if bins.batch != batch or bins.num_bins != batch * spec.nx * spec.ny:
        raise ValueError("bin assignment does not match grid spec / batch")
    if bins.seg_bins.size and (bins.seg_bins.min() < 0 or bins.seg_bins.max() >= bins.num_bins):
        raise ValueError("bin ids out of range")


def _pool_forward(ctx: engine.OpContext, features: np.ndarray, *, bins: BinAssignment,
                  nx: int, ny: int, batch: int) -> np.ndarray:
    ordered = bins.order[bins.valid_start:]
    dt = features.dtype
    acc_dt = np.float64  # long cumulative sums would lose precision in float32
    sorted_feats = features[ordered].astype(acc_dt, copy=False)
    out_flat = np.zeros((bins.num_bins, features.shape[1]), dtype=acc_dt)
    if ordered.size:
        csum = np.cumsum(sorted_feats, axis=0)
        ends = csum[bins.seg_ends - 1]
        sums = np.empty_like(ends)
        sums[0] = ends[0]
        sums[1:] = ends[1:] - ends[:-1]
        out_flat[bins.seg_bins] = sums
    ctx.bins = bins
    ctx.dtype = dt
    out = out_flat.reshape(batch, nx, ny, features.shape[1]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out.astype(dt, copy=False))


def _pool_backward(ctx: engine.OpContext, grad: np.ndarray):
    bins = ctx.bins
    b, c = grad.shape[0], grad.shape[1]
    grad_flat = np.ascontiguousarray(grad.transpose(0, 2, 3, 1)).reshape(b * grad.shape[2] * grad.shape[3], c)
    gp = np.zeros((bins.bin_ids.shape[0], c), dtype=ctx.dtype)
    in_grid = bins.bin_ids >= 0
    gp[in_grid] = grad_flat[bins.bin_ids[in_grid]]
    return (gp,)


_frustum_pool_op = engine.register_custom_op("frustum_pool", _pool_forward, _pool_backward)


def frustum_pool(features: Tensor, bins: BinAssignment, spec: BevGridSpec, batch: int = 1) -> BevTensor:
    """Sum-pool point features into pillars with the analytic backward."""
    _check_pool_args(features, bins, spec, batch)
    values = _frustum_pool_op(features, bins=bins, nx=spec.nx, ny=spec.ny, batch=batch)
    return BevTensor(values=values, spec=spec)


def frustum_pool_reference(features: Tensor, bins: BinAssignment, spec: BevGridSpec, batch: int = 1) -> BevTensor:
    """Same pooling built from primitive ops; backward runs through autodiff.

    Numerically identical to frustum_pool: both accumulate the cumulative sum
    in float64 and cast back at the end.
    """
    _check_pool_args(features, bins, spec, batch)
    dt = features.data.dtype
    c = features.data.shape[1]
    ordered = bins.order[bins.valid_start:]
    if ordered.size == 0:
        values = Tensor(np.zeros((batch, c, spec.nx, spec.ny), dtype=dt))
        return BevTensor(values=values, spec=spec)
    sorted_feats = engine.cast(engine.gather_rows(features, ordered), np.float64)
    csum = engine.cumsum0(sorted_feats)
    ends = engine.gather_rows(csum, bins.seg_ends - 1)
    starts = engine.concat([Tensor(np.zeros((1, c), dtype=np.float64)),
                            engine.slice_(ends, (slice(0, ends.data.shape[0] - 1),))], axis=0)
    sums = engine.cast(engine.sub(ends, starts), dt)
    flat = engine.scatter_rows(sums, bins.seg_bins, bins.num_bins)
    values = engine.permute(engine.reshape(flat, (batch, spec.nx, spec.ny, c)), (0, 3, 1, 2))
    return BevTensor(values=values, spec=spec)


def scatter_add_oracle(features: np.ndarray, bin_ids: np.ndarray, num_bins: int) -> np.ndarray:
    """Naive per-point scatter-add, accumulated in float64."""
    out = np.zeros((num_bins, features.shape[1]), dtype=np.float64)
    valid = bin_ids >= 0
    np.add.at(out, bin_ids[valid], features[valid].astype(np.float64))
    return out.astype(features.dtype)
