"""Virtual LiDAR: ray bundles, voxel traversal, first hits and visibility masks.

Traversal is an incremental grid walk (Amanatides-Woo) done in continuous
voxel coordinates. When the ray crosses an edge or corner exactly, x is
stepped before y before z.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .errors import RayError, SpecMismatchError
from .grid import (
    FeatureGrid,
    GridSpec,
    OccupancyGrid,
    Trajectory,
    VoxelMask,
    world_to_continuous,
)
from .parallel import blocks, ordered_map

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9
RAY_BLOCK = 8192
DILATE_TOL = 1e-9


@njit(cache=True, nogil=True)
def _start_cell(p, d, n):
    if d < 0.0:
        v = int(math.ceil(p)) - 1
    else:
        v = int(math.floor(p))
    if v < 0:
        v = 0
    if v > n - 1:
        v = n - 1
    return v


@njit(cache=True, nogil=True)
def _next_crossing(v, o, d):
    if d > 0.0:
        return (v + 1 - o) / d
    if d < 0.0:
        return (v - o) / d
    return np.inf


@njit(cache=True, nogil=True)
def _slab(o, d, n, s_near, s_far):
    if d == 0.0:
        if o < 0.0 or o >= n:
            return 1.0, 0.0
        return s_near, s_far
    a = -o / d
    b = (n - o) / d
    if a > b:
        a, b = b, a
    return max(s_near, a), min(s_far, b)


@njit(cache=True, nogil=True)
def _walk(o0, o1, o2, d0, d1, d2, s_max, n0, n1, n2, labels, free, stop_at_hit, out_idx, out_s):
    """Visit voxels along o + s*d for s in [0, s_max] (voxel units).

    Writes linear indices and entry distances into out_idx/out_s and returns
    (count, hit). With stop_at_hit the walk ends on the first voxel whose
    label differs from `free`, which is then the last one written.
    """
    s_near, s_far = _slab(o0, d0, n0, 0.0, s_max)
    s_near, s_far = _slab(o1, d1, n1, s_near, s_far)
    s_near, s_far = _slab(o2, d2, n2, s_near, s_far)
    if s_near >= s_far:
        return 0, False

    v0 = _start_cell(o0 + s_near * d0, d0, n0)
    v1 = _start_cell(o1 + s_near * d1, d1, n1)
    v2 = _start_cell(o2 + s_near * d2, d2, n2)
    step0 = 1 if d0 > 0.0 else -1
    step1 = 1 if d1 > 0.0 else -1
    step2 = 1 if d2 > 0.0 else -1
    t0 = _next_crossing(v0, o0, d0)
    t1 = _next_crossing(v1, o1, d1)
    t2 = _next_crossing(v2, o2, d2)

    s_cur = s_near
    k = 0
    while True:
        lin = (v0 * n1 + v1) * n2 + v2
        out_idx[k] = lin
        out_s[k] = s_cur
        k += 1
        if stop_at_hit and labels[lin] != free:
            return k, True
        if t0 <= t1 and t0 <= t2:
            if t0 >= s_far:
                break
            v0 += step0
            if v0 < 0 or v0 >= n0:
                break
            s_cur = max(s_cur, t0)
            t0 = _next_crossing(v0, o0, d0)
        elif t1 <= t2:
            if t1 >= s_far:
                break
            v1 += step1
            if v1 < 0 or v1 >= n1:
                break
            s_cur = max(s_cur, t1)
            t1 = _next_crossing(v1, o1, d1)
        else:
            if t2 >= s_far:
                break
            v2 += step2
            if v2 < 0 or v2 >= n2:
                break
            s_cur = max(s_cur, t2)
            t2 = _next_crossing(v2, o2, d2)
    return k, False


@njit(cache=True, nogil=True)
def _cast_block(labels, free, n0, n1, n2, origins, dirs, s_max, mark, mask, hit_idx, hit_s):
    cap = n0 + n1 + n2
    buf_idx = np.empty(cap, dtype=np.int64)
    buf_s = np.empty(cap, dtype=np.float64)
    for r in range(origins.shape[0]):
        k, hit = _walk(
            origins[r, 0], origins[r, 1], origins[r, 2],
            dirs[r, 0], dirs[r, 1], dirs[r, 2],
            s_max, n0, n1, n2, labels, free, True, buf_idx, buf_s,
        )
        if mark:
            for j in range(k):
                mask[buf_idx[j]] = True
        if hit:
            hit_idx[r] = buf_idx[k - 1]
            hit_s[r] = buf_s[k - 1]
        else:
            hit_idx[r] = -1
            hit_s[r] = np.inf


@dataclass(frozen=True)
class RayPattern:
    """Elevation x azimuth fan; azimuths uniform on [0, 2pi) starting at 0."""

    elevations: tuple[float, ...]
    azimuth_count: int
    max_range: float

    def __post_init__(self):
        elevations = tuple(float(e) for e in self.elevations)
        if not elevations:
            raise RayError("pattern needs at least one elevation")
        if int(self.azimuth_count) < 1:
            raise RayError(f"azimuth_count must be >= 1, got {self.azimuth_count}")
        if not self.max_range > 0:
            raise RayError(f"max_range must be > 0, got {self.max_range}")
        object.__setattr__(self, "elevations", elevations)
        object.__setattr__(self, "azimuth_count", int(self.azimuth_count))
        object.__setattr__(self, "max_range", float(self.max_range))

    @classmethod
    def default(cls) -> "RayPattern":
        # 32-channel surrogate, [-30, +10] degrees, 0.2 degree azimuth step.
        elev = np.deg2rad(np.linspace(-30.0, 10.0, 32))
        return cls(tuple(elev.tolist()), 1800, 60.0)

    @property
    def num_rays(self) -> int:
        return len(self.elevations) * self.azimuth_count

    def directions(self) -> np.ndarray:
        """[E * A, 3] unit vectors, elevation-major."""
        azim = 2.0 * np.pi * np.arange(self.azimuth_count, dtype=np.float64) / self.azimuth_count
        elev, azim = np.meshgrid(np.asarray(self.elevations, dtype=np.float64), azim, indexing="ij")
        d = np.stack(
            [np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)],
            axis=-1,
        ).reshape(-1, 3)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {
            "elevations": list(self.elevations),
            "azimuth_count": self.azimuth_count,
            "max_range": self.max_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RayPattern":
        try:
            return cls(tuple(d["elevations"]), int(d["azimuth_count"]), float(d["max_range"]))
        except KeyError as e:
            raise RayError(f"pattern is missing {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "RayPattern":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True, eq=False)
class RayBundle:
    """Every direction is cast from every origin."""

    origins: np.ndarray
    directions: np.ndarray
    max_range: float
    pattern: RayPattern | None = None

    def __post_init__(self):
        origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        dirs = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        if len(origins) == 0 or len(dirs) == 0:
            raise RayError("a ray bundle needs at least one ray")
        if not (np.isfinite(origins).all() and np.isfinite(dirs).all()):
            raise RayError("ray origins and directions must be finite")
        if np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() > UNIT_TOL:
            raise RayError("ray directions must have unit norm")
        if not self.max_range > 0:
            raise RayError(f"max_range must be > 0, got {self.max_range}")
        object.__setattr__(self, "origins", origins)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "max_range", float(self.max_range))

    @property
    def num_rays(self) -> int:
        return len(self.origins) * len(self.directions)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-ray origins and directions, origin-major."""
        o = np.repeat(self.origins, len(self.directions), axis=0)
        d = np.tile(self.directions, (len(self.origins), 1))
        return o, d

    def to_json(self) -> str:
        doc: dict = {"origins": self.origins.tolist()}
        if self.pattern is not None:
            doc["pattern"] = self.pattern.to_dict()
        else:
            doc["directions"] = self.directions.tolist()
            doc["max_range"] = self.max_range
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RayBundle":
        doc = json.loads(text)
        if "pattern" in doc:
            pattern = RayPattern.from_dict(doc["pattern"])
            return cls(np.asarray(doc["origins"]), pattern.directions(), pattern.max_range, pattern)
        try:
            return cls(np.asarray(doc["origins"]), np.asarray(doc["directions"]), float(doc["max_range"]))
        except KeyError as e:
            raise RayError(f"bundle is missing {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "RayBundle":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class RayHit:
    hit: bool
    depth: float
    voxel: tuple[int, int, int] | None = None
    label: int | None = None


@dataclass(frozen=True, eq=False)
class BundleHits:
    """First hits of every ray of a bundle, in bundle order.

    voxel is the linear index (-1 on miss), depth is in meters (inf on miss)
    and label is the class id (-1 on miss).
    """

    voxel: np.ndarray
    depth: np.ndarray
    label: np.ndarray

    def __len__(self) -> int:
        return len(self.voxel)


def generate_bundle(trajectory: Trajectory, pattern: RayPattern) -> RayBundle:
    if trajectory is None or not trajectory.poses:
        raise RayError("cannot generate rays from an empty trajectory")
    bundle = RayBundle(trajectory.sensor_origins(), pattern.directions(), pattern.max_range, pattern)
    logger.debug("bundle: %d origins x %d directions", len(bundle.origins), len(bundle.directions))
    return bundle


def _check_ray(direction, max_range) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64).reshape(3)
    if not np.isfinite(d).all() or abs(float(np.linalg.norm(d)) - 1.0) > UNIT_TOL:
        raise RayError(f"direction {d.tolist()} is not a unit vector")
    if not max_range >= 0:
        raise RayError(f"max_range must be >= 0, got {max_range}")
    return d


def traverse_with_depth(spec: GridSpec, origin, direction, max_range: float) -> tuple[np.ndarray, np.ndarray]:
    """[K, 3] voxel indices in entry order and their entry distances in meters."""
    d = _check_ray(direction, max_range)
    o = world_to_continuous(spec, np.asarray(origin, dtype=np.float64).reshape(3))
    n0, n1, n2 = spec.dims
    cap = n0 + n1 + n2
    out_idx = np.empty(cap, dtype=np.int64)
    out_s = np.empty(cap, dtype=np.float64)
    k, _ = _walk(
        o[0], o[1], o[2], d[0], d[1], d[2], float(max_range) / spec.voxel_size,
        n0, n1, n2, np.zeros(0, dtype=np.uint8), 0, False, out_idx, out_s,
    )
    idx = np.stack(np.unravel_index(out_idx[:k], spec.dims), axis=-1)
    return idx, out_s[:k] * spec.voxel_size


def traverse(spec: GridSpec, origin, direction, max_range: float) -> list[tuple[int, int, int]]:
    idx, _ = traverse_with_depth(spec, origin, direction, max_range)
    return [tuple(int(v) for v in row) for row in idx]


def _cast(grid: OccupancyGrid, origins: np.ndarray, dirs: np.ndarray, max_range: float,
          mark: bool, threads: int | None) -> tuple[np.ndarray | None, BundleHits]:
    spec = grid.spec
    n0, n1, n2 = spec.dims
    labels = grid.labels.reshape(-1)
    o_vox = np.ascontiguousarray(world_to_continuous(spec, origins))
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    s_max = float(max_range) / spec.voxel_size

    def run(block: tuple[int, int]):
        lo, hi = block
        mask = np.zeros(spec.num_voxels if mark else 0, dtype=np.bool_)
        hit_idx = np.empty(hi - lo, dtype=np.int64)
        hit_s = np.empty(hi - lo, dtype=np.float64)
        _cast_block(labels, grid.free_class, n0, n1, n2, o_vox[lo:hi], dirs[lo:hi],
                    s_max, mark, mask, hit_idx, hit_s)
        return mask, hit_idx, hit_s

    merged = np.zeros(spec.num_voxels, dtype=np.bool_) if mark else None
    idx_parts, s_parts = [], []
    for mask, hit_idx, hit_s in ordered_map(run, blocks(len(o_vox), RAY_BLOCK), threads):
        if merged is not None:
            merged |= mask
        idx_parts.append(hit_idx)
        s_parts.append(hit_s)

    voxel = np.concatenate(idx_parts)
    depth = np.concatenate(s_parts) * spec.voxel_size
    label = np.full(len(voxel), -1, dtype=np.int64)
    hit = voxel >= 0
    label[hit] = labels[voxel[hit]]
    logger.debug("cast %d rays, %d hits", len(voxel), int(hit.sum()))
    return merged, BundleHits(voxel, depth, label)


def cast_first_hit(grid: OccupancyGrid, origin, direction, max_range: float) -> RayHit:
    d = _check_ray(direction, max_range)
    o = np.asarray(origin, dtype=np.float64).reshape(1, 3)
    _, hits = _cast(grid, o, d.reshape(1, 3), max_range, mark=False, threads=1)
    if hits.voxel[0] < 0:
        return RayHit(False, math.inf)
    return RayHit(True, float(hits.depth[0]), grid.spec.unravel(hits.voxel[0]), int(hits.label[0]))


def cast_bundle(grid: OccupancyGrid, bundle: RayBundle, threads: int | None = None) -> BundleHits:
    o, d = bundle.flat()
    _, hits = _cast(grid, o, d, bundle.max_range, mark=False, threads=threads)
    return hits


def _visibility(grid: OccupancyGrid, bundle: RayBundle, threads: int | None):
    o, d = bundle.flat()
    bits, hits = _cast(grid, o, d, bundle.max_range, mark=True, threads=threads)
    return bits.reshape(grid.spec.dims), hits


def visible_mask_v1(grid: OccupancyGrid, bundle: RayBundle, threads: int | None = None) -> VoxelMask:
    """Voxels seen by any ray, up to and including its first occupied voxel."""
    bits, _ = _visibility(grid, bundle, threads)
    return VoxelMask(grid.spec, bits)


def dilation_ball(radius: float, voxel_size: float) -> np.ndarray:
    """Boolean structuring element: offsets whose center distance is <= radius."""
    if radius < 0:
        raise ValueError(f"dilate radius must be >= 0, got {radius}")
    r = radius / voxel_size
    ri = int(math.floor(r + DILATE_TOL))
    ax = np.arange(-ri, ri + 1)
    dx, dy, dz = np.meshgrid(ax, ax, ax, indexing="ij")
    return (dx * dx + dy * dy + dz * dz) <= r * r + DILATE_TOL


def visible_mask_v2(grid: OccupancyGrid, bundle: RayBundle, dilate_radius: float = 2.0,
                    threads: int | None = None) -> VoxelMask:
    """V1 plus every voxel within dilate_radius of a ray-visible occupied voxel."""
    ball = dilation_ball(dilate_radius, grid.spec.voxel_size)
    bits, hits = _visibility(grid, bundle, threads)
    hit_bits = np.zeros(grid.spec.num_voxels, dtype=bool)
    hit_bits[hits.voxel[hits.voxel >= 0]] = True
    if hit_bits.any():
        grown = ndimage.binary_dilation(hit_bits.reshape(grid.spec.dims), structure=ball)
        bits = bits | grown
    return VoxelMask(grid.spec, bits)


def select_hard_examples(uncertainty: FeatureGrid, mask: VoxelMask, fraction: float) -> VoxelMask:
    """Top ceil(fraction * count) masked voxels by uncertainty, ties to lower index."""
    if uncertainty.spec != mask.spec:
        raise SpecMismatchError("uncertainty and mask grids differ")
    if uncertainty.channels != 1:
        raise ValueError(f"uncertainty must have 1 channel, got {uncertainty.channels}")
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    candidates = np.flatnonzero(mask.bits.reshape(-1))
    out = np.zeros(mask.spec.num_voxels, dtype=bool)
    if len(candidates):
        k = math.ceil(round(fraction * len(candidates), 9))
        u = uncertainty.values.reshape(-1)[candidates]
        order = np.lexsort((candidates, -u))
        out[candidates[order[:k]]] = True
    return VoxelMask(mask.spec, out)


def load_bundle(bundle_path=None, trajectory_path=None, pattern_path=None, pattern: RayPattern | None = None) -> RayBundle:
    """A stored bundle, or one generated from a trajectory and a ray pattern."""
    if bundle_path is not None:
        return RayBundle.load(bundle_path)
    if trajectory_path is None:
        raise RayError("need either a bundle or a trajectory")
    if pattern_path is not None:
        pattern = RayPattern.load(pattern_path)
    pattern = pattern or RayPattern.default()
    return generate_bundle(Trajectory.load(trajectory_path), pattern)


__all__ = [
    "BundleHits",
    "RayBundle",
    "RayHit",
    "RayPattern",
    "cast_bundle",
    "cast_first_hit",
    "dilation_ball",
    "generate_bundle",
    "load_bundle",
    "select_hard_examples",
    "traverse",
    "traverse_with_depth",
    "visible_mask_v1",
    "visible_mask_v2",
]
