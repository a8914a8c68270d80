"""Voxel grid data model and world <-> voxel transforms.

All dense arrays are stored C-order with x as the slowest axis, so the linear
index of voxel (x, y, z) is ((x * ny) + y) * nz + z. The metric box is
half-open: [origin, origin + dims * voxel_size).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidLabelError, NonFiniteError, SpecMismatchError

NUM_CLASSES = 17
FREE_CLASS = 16

OPENOCC_CLASS_NAMES = (
    "car", "truck", "trailer", "bus", "construction_vehicle",
    "bicycle", "motorcycle", "pedestrian", "traffic_cone", "barrier",
    "driveable_surface", "other_flat", "sidewalk",
    "terrain", "manmade", "vegetation", "free",
)

# Movable traffic participants; flow error is evaluated over these.
FOREGROUND_CLASSES = (0, 1, 2, 3, 4, 5, 6, 7)


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float, float] = (-40.0, -40.0, -1.0)
    voxel_size: float = 0.4
    dims: tuple[int, int, int] = (200, 200, 16)

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        dims = tuple(int(v) for v in self.dims)
        if len(origin) != 3 or len(dims) != 3:
            raise ValueError("origin and dims must have 3 components")
        if not all(math.isfinite(v) for v in origin):
            raise ValueError(f"origin must be finite, got {origin}")
        if not (self.voxel_size > 0 and math.isfinite(self.voxel_size)):
            raise ValueError(f"voxel_size must be > 0, got {self.voxel_size}")
        if any(d < 1 for d in dims):
            raise ValueError(f"dims must all be >= 1, got {dims}")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))

    @property
    def num_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def upper(self) -> tuple[float, float, float]:
        """Max corner of the box (excluded)."""
        return tuple(o + d * self.voxel_size for o, d in zip(self.origin, self.dims))

    def linear_index(self, index) -> int:
        x, y, z = (int(v) for v in index)
        _, ny, nz = self.dims
        return (x * ny + y) * nz + z

    def unravel(self, linear: int) -> tuple[int, int, int]:
        return tuple(int(v) for v in np.unravel_index(int(linear), self.dims))

    def voxel_centers(self) -> np.ndarray:
        """[N, 3] metric centers of every voxel, C-order."""
        axes = [
            o + (np.arange(d, dtype=np.float64) + 0.5) * self.voxel_size
            for o, d in zip(self.origin, self.dims)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {
            "origin": list(self.origin),
            "voxel_size": self.voxel_size,
            "dims": list(self.dims),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(
            origin=tuple(d.get("origin", cls.origin)),
            voxel_size=d.get("voxel_size", cls.voxel_size),
            dims=tuple(d.get("dims", cls.dims)),
        )


def voxel_to_world(spec: GridSpec, index) -> tuple[float, float, float]:
    """Center of voxel `index` in meters."""
    idx = tuple(int(v) for v in index)
    if len(idx) != 3 or any(not 0 <= i < d for i, d in zip(idx, spec.dims)):
        raise IndexError(f"voxel index {idx} out of range for dims {spec.dims}")
    return tuple(o + (i + 0.5) * spec.voxel_size for o, i in zip(spec.origin, idx))


def world_to_voxel(spec: GridSpec, point) -> tuple[int, int, int] | None:
    """Voxel containing `point`, or None when the point is outside the box."""
    out = []
    for p, o, d in zip(point, spec.origin, spec.dims):
        i = math.floor((float(p) - o) / spec.voxel_size)
        if not 0 <= i < d:
            return None
        out.append(i)
    return tuple(out)


def world_to_continuous(spec: GridSpec, points: np.ndarray) -> np.ndarray:
    """Metric points -> continuous voxel coordinates (voxel i spans [i, i+1))."""
    pts = np.asarray(points, dtype=np.float64)
    return (pts - np.asarray(spec.origin)) / spec.voxel_size


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, order="C", copy=True)
    a.setflags(write=False)
    return a


def check_same_spec(*items) -> GridSpec:
    specs = [it.spec for it in items]
    for s in specs[1:]:
        if s != specs[0]:
            raise SpecMismatchError(f"grid specs differ: {specs[0]} vs {s}")
    return specs[0]


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    spec: GridSpec
    labels: np.ndarray
    num_classes: int = NUM_CLASSES
    free_class: int = FREE_CLASS

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.size != self.spec.num_voxels:
            raise ValueError(f"expected {self.spec.num_voxels} labels, got {labels.size}")
        if not 0 <= self.free_class < self.num_classes <= 256:
            raise ValueError(
                f"free_class {self.free_class} must lie in [0, num_classes={self.num_classes})"
            )
        if labels.size and int(labels.min()) < 0:
            raise InvalidLabelError(f"negative label {int(labels.min())}")
        if labels.size and int(labels.max()) >= self.num_classes:
            raise InvalidLabelError(
                f"label {int(labels.max())} >= num_classes {self.num_classes}"
            )
        labels = labels.astype(np.uint8, copy=False).reshape(self.spec.dims)
        object.__setattr__(self, "labels", _frozen(labels))

    @classmethod
    def empty(cls, spec: GridSpec, num_classes: int = NUM_CLASSES, free_class: int = FREE_CLASS):
        return cls(spec, np.full(spec.dims, free_class, dtype=np.uint8), num_classes, free_class)

    @property
    def occupied(self) -> np.ndarray:
        return self.labels != self.free_class

    def with_labels(self, labels: np.ndarray) -> "OccupancyGrid":
        return OccupancyGrid(self.spec, labels, self.num_classes, self.free_class)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Per-voxel (x, y) velocity in m/s."""

    spec: GridSpec
    flow: np.ndarray

    def __post_init__(self):
        flow = np.asarray(self.flow)
        if flow.dtype not in (np.float32, np.float64):
            flow = flow.astype(np.float64)
        if flow.size != self.spec.num_voxels * 2:
            raise ValueError(f"expected {self.spec.num_voxels} x 2 flow values, got {flow.size}")
        if not np.isfinite(flow).all():
            raise NonFiniteError("flow field contains NaN or Inf")
        object.__setattr__(self, "flow", _frozen(flow.reshape(*self.spec.dims, 2)))

    @classmethod
    def zeros(cls, spec: GridSpec, dtype=np.float32) -> "FlowField":
        return cls(spec, np.zeros((*spec.dims, 2), dtype=dtype))


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    spec: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        n = self.spec.num_voxels
        if values.size == 0 or values.size % n != 0:
            raise ValueError(f"feature payload of {values.size} values does not fit {n} voxels")
        if not np.isfinite(values).all():
            raise NonFiniteError("feature grid contains NaN or Inf")
        channels = values.size // n
        object.__setattr__(self, "values", _frozen(values.reshape(*self.spec.dims, channels)))

    @property
    def channels(self) -> int:
        return int(self.values.shape[-1])


@dataclass(frozen=True, eq=False)
class VoxelMask:
    spec: GridSpec
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.size != self.spec.num_voxels:
            raise ValueError(f"expected {self.spec.num_voxels} mask bits, got {bits.size}")
        object.__setattr__(self, "bits", _frozen(bits.astype(bool, copy=False).reshape(self.spec.dims)))

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other) -> bool:
        if not isinstance(other, VoxelMask):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def __or__(self, other: "VoxelMask") -> "VoxelMask":
        check_same_spec(self, other)
        return VoxelMask(self.spec, self.bits | other.bits)

    def issubset(self, other: "VoxelMask") -> bool:
        check_same_spec(self, other)
        return not bool((self.bits & ~other.bits).any())


@dataclass(frozen=True)
class Pose:
    position: tuple[float, float, float]
    height: float = 0.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ValueError(f"pose position must be 3 finite values, got {self.position}")
        object.__setattr__(self, "position", pos)

    @property
    def sensor_origin(self) -> tuple[float, float, float]:
        x, y, z = self.position
        return (x, y, z + self.height)


@dataclass(frozen=True)
class Trajectory:
    poses: tuple[Pose, ...]

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise ValueError("trajectory needs at least one pose")
        object.__setattr__(self, "poses", poses)

    def sensor_origins(self) -> np.ndarray:
        return np.array([p.sensor_origin for p in self.poses], dtype=np.float64)

    def to_json(self) -> str:
        return json.dumps(
            {"poses": [{"position": list(p.position), "height": p.height} for p in self.poses]},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        doc = json.loads(text)
        try:
            return cls(tuple(Pose(tuple(p["position"]), float(p.get("height", 0.0))) for p in doc["poses"]))
        except (KeyError, TypeError) as e:
            raise ValueError(f"malformed trajectory document: {e!r}") from e

    @classmethod
    def load(cls, path: str | Path) -> "Trajectory":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))
