"""OCCV container: magic, u32 LE header length, JSON header, raw LE payload.

    bytes 0-3       b"OCCV"
    bytes 4-7       header length H (unsigned 32-bit little-endian)
    bytes 8..8+H    UTF-8 JSON header
    rest            payload, C-order (x slowest)
"""

import json
import logging
import struct
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimsMismatchError,
    DtypeMismatchError,
    HeaderError,
    NonFiniteError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .grid import FeatureGrid, FlowField, GridSpec, OccupancyGrid, VoxelMask

logger = logging.getLogger(__name__)

MAGIC = b"OCCV"
VERSION = 1

_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_ALLOWED = {
    "occ": ("u8",),
    "mask": ("u8",),
    "flow": ("f32", "f64"),
    "feat": ("f32", "f64"),
}

Payload = OccupancyGrid | FlowField | VoxelMask | FeatureGrid


def _dtype_name(a: np.ndarray) -> str:
    for name, dt in _DTYPES.items():
        if a.dtype == dt.newbyteorder("="):
            return name
    raise DtypeMismatchError(f"unsupported array dtype {a.dtype}")


def _header_and_array(obj: Payload) -> tuple[dict, np.ndarray]:
    header = {"version": VERSION, **obj.spec.to_dict()}
    if isinstance(obj, OccupancyGrid):
        header.update(kind="occ", num_classes=obj.num_classes, free_class=obj.free_class)
        arr = obj.labels
    elif isinstance(obj, VoxelMask):
        header.update(kind="mask")
        arr = obj.bits.astype(np.uint8)
    elif isinstance(obj, FlowField):
        header.update(kind="flow")
        arr = obj.flow
    elif isinstance(obj, FeatureGrid):
        header.update(kind="feat", channels=obj.channels)
        arr = obj.values
    else:
        raise TypeError(f"cannot store {type(obj).__name__} in an OCCV container")
    header["dtype"] = _dtype_name(arr)
    return header, arr


def encode(obj: Payload) -> bytes:
    header, arr = _header_and_array(obj)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(arr).astype(_DTYPES[header["dtype"]], copy=False).tobytes()
    return MAGIC + struct.pack("<I", len(head)) + head + payload


def save_container(path: str | Path, obj: Payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode(obj)
    with open(path, "wb") as f:
        f.write(data)
    logger.info("wrote %s (%d bytes)", path, len(data))


def _read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < 8:
        raise TruncatedPayloadError(f"container is only {len(data)} bytes")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    (head_len,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + head_len:
        raise TruncatedPayloadError("container ends inside the header")
    try:
        header = json.loads(data[8 : 8 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise HeaderError(f"unreadable header: {e}") from e
    if not isinstance(header, dict):
        raise HeaderError("header must be a JSON object")
    version = header.get("version", VERSION)
    if version != VERSION:
        raise VersionMismatchError(f"container version {version}, this build reads {VERSION}")
    return header, 8 + head_len


def _spec_from_header(header: dict) -> GridSpec:
    try:
        return GridSpec(
            origin=tuple(header["origin"]),
            voxel_size=float(header["voxel_size"]),
            dims=tuple(header["dims"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise HeaderError(f"invalid grid description in header: {e}") from e


def decode(data: bytes) -> Payload:
    header, offset = _read_header(data)
    kind = header.get("kind")
    if kind not in _ALLOWED:
        raise HeaderError(f"unknown container kind {kind!r}")
    dtype_name = header.get("dtype")
    if dtype_name not in _ALLOWED[kind]:
        raise DtypeMismatchError(f"dtype {dtype_name!r} not allowed for kind {kind!r}")
    spec = _spec_from_header(header)

    per_voxel = {"occ": 1, "mask": 1, "flow": 2}.get(kind)
    if kind == "feat":
        per_voxel = header.get("channels")
        if not isinstance(per_voxel, int) or per_voxel < 1:
            raise HeaderError(f"feat container needs a positive 'channels', got {per_voxel!r}")

    dtype = _DTYPES[dtype_name]
    expected = spec.num_voxels * per_voxel * dtype.itemsize
    payload = data[offset:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload has {len(payload)} bytes, header dims {spec.dims} need {expected}"
        )
    if len(payload) > expected:
        raise DimsMismatchError(
            f"payload has {len(payload)} bytes, header dims {spec.dims} need only {expected}"
        )
    arr = np.frombuffer(payload, dtype=dtype).astype(dtype.newbyteorder("="))

    if kind == "occ":
        return OccupancyGrid(
            spec,
            arr,
            num_classes=int(header.get("num_classes", 17)),
            free_class=int(header.get("free_class", 16)),
        )
    if kind == "mask":
        if arr.size and int(arr.max()) > 1:
            raise DtypeMismatchError("mask payload must hold only 0/1 bytes")
        return VoxelMask(spec, arr.astype(bool))
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind} payload contains NaN or Inf")
    if kind == "flow":
        return FlowField(spec, arr)
    return FeatureGrid(spec, arr.reshape(*spec.dims, per_voxel))


def load_container(path: str | Path) -> Payload:
    with open(path, "rb") as f:
        data = f.read()
    obj = decode(data)
    logger.debug("loaded %s: %s %s", path, type(obj).__name__, obj.spec.dims)
    return obj


def load_kind(path: str | Path, cls: type):
    """load_container, insisting on one payload type."""
    obj = load_container(path)
    if not isinstance(obj, cls):
        raise HeaderError(f"{path}: expected {cls.__name__}, found {type(obj).__name__}")
    return obj
