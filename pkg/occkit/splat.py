"""Inverse trilinear splatting and flow-driven forward warping.

Positions are continuous voxel coordinates (voxel i spans [i, i + 1)) and
weights are anchored at voxel centers: a sample at p is shared among the 8
cells around p - 0.5. Corners outside the grid are dropped together with
their mass.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import MetricError
from .grid import FeatureGrid, FlowField, GridSpec, OccupancyGrid, VoxelMask, check_same_spec, world_to_continuous
from .parallel import ordered_map

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.5
CE_EPS = 1e-6

# Corner offsets, x slowest.
_BITS = np.array([(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)], dtype=np.int64)


@dataclass(frozen=True)
class SplatSample:
    position: tuple[float, float, float]
    value: tuple[float, ...]

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        value = tuple(float(v) for v in np.atleast_1d(self.value))
        if len(pos) != 3 or not np.isfinite(pos).all() or not np.isfinite(value).all():
            raise ValueError("splat samples need a finite 3D position and finite values")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "value", value)


def _corners(pos: np.ndarray, dims: Sequence[int]):
    """Linear index, per-axis factors and in-bounds flag of the 8 corners.

    Shapes are [8, M], [8, M, 3] and [8, M].
    """
    q = np.asarray(pos, dtype=np.float64).reshape(-1, 3) - 0.5
    base = np.floor(q)
    frac = q - base
    cell = base.astype(np.int64)[None] + _BITS[:, None, :]
    bit = _BITS[:, None, :] == 1
    fac = np.where(bit, frac[None], 1.0 - frac[None])
    inb = ((cell >= 0) & (cell < np.asarray(dims))).all(axis=-1)
    lin = (cell[..., 0] * dims[1] + cell[..., 1]) * dims[2] + cell[..., 2]
    return lin, fac, inb


def _weights(fac: np.ndarray) -> np.ndarray:
    return fac[..., 0] * fac[..., 1] * fac[..., 2]


def splat_weights(position, dims: Sequence[int]) -> list[tuple[tuple[int, int, int], float]]:
    """In-bounds neighbors of `position` carrying a nonzero trilinear weight."""
    pos = np.asarray(position, dtype=np.float64).reshape(3)
    if not np.isfinite(pos).all():
        raise ValueError(f"position must be finite, got {pos.tolist()}")
    lin, fac, inb = _corners(pos, dims)
    w = _weights(fac)
    out = []
    for k in range(8):
        if inb[k, 0] and w[k, 0] > 0.0:
            idx = tuple(int(v) for v in np.unravel_index(int(lin[k, 0]), tuple(dims)))
            out.append((idx, float(w[k, 0])))
    return out


def _scatter(positions: np.ndarray, values: np.ndarray, spec: GridSpec, threads: int | None) -> np.ndarray:
    lin, fac, inb = _corners(positions, spec.dims)
    w = _weights(fac)
    idx = lin[inb]
    wk = w[inb]
    src = np.broadcast_to(np.arange(len(values)), lin.shape)[inb]

    def channel(c: int) -> np.ndarray:
        return np.bincount(idx, weights=wk * values[src, c], minlength=spec.num_voxels)

    cols = list(ordered_map(channel, range(values.shape[1]), threads))
    return np.stack(cols, axis=-1).reshape(*spec.dims, values.shape[1])


def splat_arrays(positions, values, spec: GridSpec, threads: int | None = None) -> FeatureGrid:
    """Scatter-add [M, C] values from [M, 3] voxel-space positions."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if len(values) != len(positions):
        raise ValueError(f"{len(positions)} positions but {len(values)} values")
    if not (np.isfinite(positions).all() and np.isfinite(values).all()):
        raise ValueError("splat positions and values must be finite")
    return FeatureGrid(spec, _scatter(positions, values, spec, threads))


def splat(samples: Sequence[SplatSample], spec: GridSpec, channels: int, threads: int | None = None) -> FeatureGrid:
    for s in samples:
        if len(s.value) != channels:
            raise ValueError(f"sample has {len(s.value)} channels, expected {channels}")
    if not samples:
        return FeatureGrid(spec, np.zeros((*spec.dims, channels)))
    return splat_arrays([s.position for s in samples], [s.value for s in samples], spec, threads)


def densify(points_world, values, spec: GridSpec, threads: int | None = None) -> FeatureGrid:
    """Splat values attached to metric points onto the dense grid."""
    return splat_arrays(world_to_continuous(spec, points_world), values, spec, threads)


def _check_dt(dt: float) -> float:
    if not dt > 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    return float(dt)


def _warped_positions(spec: GridSpec, flow: FlowField, dt: float, rows: np.ndarray | None = None) -> np.ndarray:
    nx, ny, nz = spec.dims
    gx, gy, gz = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    pos = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + 0.5
    shift = flow.flow.reshape(-1, 2).astype(np.float64) * dt / spec.voxel_size
    if rows is not None:
        pos, shift = pos[rows], shift[rows]
    pos[:, 0] += shift[:, 0]
    pos[:, 1] += shift[:, 1]
    return pos


def warp_forward(features: FeatureGrid, flow: FlowField, dt: float = DEFAULT_DT,
                 threads: int | None = None) -> FeatureGrid:
    """Move every voxel's features along its flow by dt seconds and splat them."""
    spec = check_same_spec(features, flow)
    dt = _check_dt(dt)
    pos = _warped_positions(spec, flow, dt)
    out = _scatter(pos, features.values.reshape(-1, features.channels).astype(np.float64), spec, threads)
    return FeatureGrid(spec, out.astype(features.values.dtype, copy=False))


def warp_occupancy(gt_current: OccupancyGrid, flow: FlowField, dt: float = DEFAULT_DT,
                   threads: int | None = None) -> FeatureGrid:
    """Per-class soft occupancy after warping; free voxels carry no mass."""
    spec = check_same_spec(gt_current, flow)
    dt = _check_dt(dt)
    labels = gt_current.labels.reshape(-1)
    rows = np.flatnonzero(labels != gt_current.free_class)
    one_hot = np.zeros((len(rows), gt_current.num_classes))
    one_hot[np.arange(len(rows)), labels[rows]] = 1.0
    logger.debug("warping %d occupied voxels", len(rows))
    out = _scatter(_warped_positions(spec, flow, dt, rows), one_hot, spec, threads)
    return FeatureGrid(spec, out)


def warp_score(warped: FeatureGrid, gt_future: OccupancyGrid, mask: VoxelMask | None = None,
               eps: float = CE_EPS) -> float:
    """Mean cross-entropy of the smoothed warped class mass against gt_future labels."""
    items = (warped, gt_future) if mask is None else (warped, gt_future, mask)
    check_same_spec(*items)
    C, free = gt_future.num_classes, gt_future.free_class
    if warped.channels != C:
        raise ValueError(f"warped grid has {warped.channels} channels, expected {C}")
    labels = gt_future.labels.reshape(-1).astype(np.int64)
    sel = labels != free
    if mask is not None:
        sel &= mask.bits.reshape(-1)
    if not sel.any():
        raise MetricError("warp_score needs at least one occupied future voxel")

    keep = [c for c in range(C) if c != free]
    mass = warped.values.reshape(-1, C)[sel][:, keep].astype(np.float64)
    target = labels[sel]
    target = target - (target > free)
    q = (mass[np.arange(len(target)), target] + eps) / (mass.sum(axis=1) + len(keep) * eps)
    return float(-np.log(q).mean())


def grad_warp(features: FeatureGrid, flow: FlowField, dt: float, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of <upstream, warp_forward(features, flow, dt)>.

    Returns (d_features [*dims, C], d_flow [*dims, 2]). On a lattice plane the
    flow derivative is the one-sided derivative from the positive side.
    """
    spec = check_same_spec(features, flow)
    dt = _check_dt(dt)
    G = upstream.values if isinstance(upstream, FeatureGrid) else np.asarray(upstream)
    C = features.channels
    if G.shape != features.values.shape:
        raise ValueError(f"upstream gradient shape {G.shape} != features {features.values.shape}")
    G = G.reshape(-1, C).astype(np.float64)
    F = features.values.reshape(-1, C).astype(np.float64)

    lin, fac, inb = _corners(_warped_positions(spec, flow, dt), spec.dims)
    w = _weights(fac) * inb
    # Out-of-bounds corners read row 0 but are zeroed by inb.
    g_at = G[np.where(inb, lin, 0)]
    d_features = np.einsum("km,kmc->mc", w, g_at)

    fg = np.einsum("mc,kmc->km", F, g_at) * inb
    sign = np.where(_BITS == 1, 1.0, -1.0)
    scale = dt / spec.voxel_size
    d_flow = np.empty((len(F), 2))
    for a in range(2):
        others = [b for b in range(3) if b != a]
        dw = sign[:, a][:, None] * fac[..., others[0]] * fac[..., others[1]]
        d_flow[:, a] = (dw * fg).sum(axis=0) * scale
    return d_features.reshape(features.values.shape), d_flow.reshape(*spec.dims, 2)
