"""Seeded synthetic driving scenes: boxes on an optional ground plane.

Random numbers come from numpy's PCG64 bit generator seeded with
SynthConfig.seed, so a config yields the same scene on every platform.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .grid import (
    FOREGROUND_CLASSES,
    FREE_CLASS,
    NUM_CLASSES,
    FlowField,
    GridSpec,
    OccupancyGrid,
    Pose,
    Trajectory,
)

logger = logging.getLogger(__name__)

GROUND_CLASS = 10  # driveable_surface
MAX_ATTEMPTS = 1000
SENSOR_HEIGHT = 1.84


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    spec: GridSpec = field(default_factory=GridSpec)
    n_boxes: int = 8
    class_pool: tuple[int, ...] = (0, 1, 3, 7, 9)
    velocity_range: tuple[float, float] = (-10.0, 10.0)
    ground_plane: bool = True
    dt: float = 0.5
    box_size: tuple[int, int] = (2, 8)
    box_height: tuple[int, int] = (1, 4)
    sensor_height: float = SENSOR_HEIGHT

    def __post_init__(self):
        if self.n_boxes < 0:
            raise ValueError(f"n_boxes must be >= 0, got {self.n_boxes}")
        pool = tuple(int(c) for c in self.class_pool)
        if not pool or any(not 0 <= c < NUM_CLASSES or c == FREE_CLASS for c in pool):
            raise ValueError(f"class_pool must hold non-free class ids, got {pool}")
        lo, hi = (float(v) for v in self.velocity_range)
        if lo > hi:
            raise ValueError(f"velocity_range {self.velocity_range} is empty")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        for name in ("box_size", "box_height"):
            a, b = getattr(self, name)
            if not 1 <= a <= b:
                raise ValueError(f"{name} must satisfy 1 <= min <= max, got {(a, b)}")
        if isinstance(self.spec, dict):
            object.__setattr__(self, "spec", GridSpec.from_dict(self.spec))
        object.__setattr__(self, "class_pool", pool)
        object.__setattr__(self, "velocity_range", (lo, hi))
        object.__setattr__(self, "seed", int(self.seed))


def _draw_box(rng: np.random.Generator, config: SynthConfig, base: int, taken: np.ndarray):
    """One box that fits the grid now and after moving, clear of every footprint in `taken`."""
    nx, ny, nz = config.spec.dims
    for _ in range(MAX_ATTEMPTS):
        cls = int(rng.choice(config.class_pool))
        sx, sy = (int(v) for v in rng.integers(config.box_size[0], config.box_size[1] + 1, size=2))
        sz = int(rng.integers(config.box_height[0], config.box_height[1] + 1))
        x0, y0 = (int(v) for v in rng.integers(0, [nx, ny]))
        z0 = base
        if cls in FOREGROUND_CLASSES:
            vel = rng.uniform(*config.velocity_range, size=2)
        else:
            vel = np.zeros(2)
        dx, dy = (int(v) for v in np.rint(vel * config.dt / config.spec.voxel_size))
        fits = (
            x0 + sx <= nx and y0 + sy <= ny and z0 + sz <= nz
            and 0 <= x0 + dx and x0 + dx + sx <= nx
            and 0 <= y0 + dy and y0 + dy + sy <= ny
        )
        if not fits:
            continue
        now = np.s_[x0 : x0 + sx, y0 : y0 + sy]
        later = np.s_[x0 + dx : x0 + dx + sx, y0 + dy : y0 + dy + sy]
        if not (taken[now].any() or taken[later].any()):
            taken[now] = taken[later] = True
            return cls, (x0, y0, z0), (sx, sy, sz), vel, (dx, dy)
    raise ValueError(f"could not place a box in a {config.spec.dims} grid after {MAX_ATTEMPTS} draws")


def synth_scene(config: SynthConfig) -> tuple[OccupancyGrid, OccupancyGrid, FlowField, Trajectory]:
    """(gt_current, gt_future, flow, trajectory) for one seeded scene."""
    spec = config.spec
    rng = np.random.Generator(np.random.PCG64(config.seed))
    current = np.full(spec.dims, FREE_CLASS, dtype=np.uint8)
    flow = np.zeros((*spec.dims, 2), dtype=np.float32)
    base = 0
    if config.ground_plane:
        current[:, :, 0] = GROUND_CLASS
        base = 1
    future = current.copy()
    # Ground cells under a box in either frame.
    taken = np.zeros(spec.dims[:2], dtype=bool)

    for _ in range(config.n_boxes):
        cls, (x0, y0, z0), (sx, sy, sz), vel, (dx, dy) = _draw_box(rng, config, base, taken)
        box = np.s_[x0 : x0 + sx, y0 : y0 + sy, z0 : z0 + sz]
        current[box] = cls
        flow[box] = vel.astype(np.float32)
        future[x0 + dx : x0 + dx + sx, y0 + dy : y0 + dy + sy, z0 : z0 + sz] = cls
        logger.debug("box class %d at %s size %s moving %s", cls, (x0, y0, z0), (sx, sy, sz), (dx, dy))

    return (
        OccupancyGrid(spec, current),
        OccupancyGrid(spec, future),
        FlowField(spec, flow),
        straight_trajectory(spec, config.ground_plane, config.sensor_height),
    )


def straight_trajectory(spec: GridSpec, ground_plane: bool = True, sensor_height: float = SENSOR_HEIGHT) -> Trajectory:
    """Three poses along +x through the grid center, standing on the ground layer."""
    lo, hi = np.asarray(spec.origin), np.asarray(spec.upper)
    mid = (lo + hi) / 2.0
    quarter = (hi[0] - lo[0]) / 4.0
    z = lo[2] + (spec.voxel_size if ground_plane and spec.dims[2] > 1 else 0.0)
    # Keep the sensor inside the box so every ray starts in the grid.
    height = min(sensor_height, max(hi[2] - z - spec.voxel_size / 2.0, 0.0))
    return Trajectory(tuple(
        Pose((float(mid[0] + k * quarter), float(mid[1]), float(z)), float(height)) for k in (-1, 0, 1)
    ))
