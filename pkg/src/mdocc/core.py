"""Shared domain types, the MOCC grid codec, and seeded random-stream plumbing.

Conventions used across the whole package:

* grid dims are ``(D, H, W)`` = (cells along x, cells along y, cells along z),
  stored row-major with D outermost and W innermost;
* labels are unsigned 16-bit class ids;
* all floating-point math is 64-bit.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

MOCC_MAGIC = b"MOCC"
MOCC_VERSION = 1
_MOCC_HEADER = struct.Struct("<4sHIIIdddd H".replace(" ", ""))  # 52 bytes


class CodecError(ValueError):
    """Malformed binary stream; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class BadMagic(CodecError):
    pass


class VersionUnsupported(CodecError):
    pass


class TruncatedPayload(CodecError):
    pass


def rng_stream(seed, tag):
    """Deterministic, platform-independent random source for (seed, tag).

    Identical (seed, tag) pairs yield identical draw sequences; distinct tags
    (or seeds) yield independent streams. Every randomized operation in the
    package draws only from streams created here.
    """
    digest = hashlib.sha256(f"{int(seed) & 0xFFFFFFFFFFFFFFFF}:{tag}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


@dataclass(frozen=True)
class Range3D:
    """Axis-aligned spatial extent in meters."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    def __post_init__(self):
        vals = (self.x_min, self.x_max, self.y_min, self.y_max, self.z_min, self.z_max)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"range bounds must be finite, got {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max and self.z_min < self.z_max):
            raise ValueError(f"degenerate range: {vals}")

    @property
    def mins(self):
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self):
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def spans(self):
        return self.maxs - self.mins

    def contains_point(self, p):
        """Half-open membership test: min <= coord < max on every axis."""
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.mins) and np.all(p < self.maxs))

    def contains_range(self, other):
        return bool(np.all(other.mins >= self.mins) and np.all(other.maxs <= self.maxs))


@dataclass(frozen=True)
class LidarConfig:
    """Spinning-LiDAR beam geometry."""

    beam_count: int
    vfov_min_deg: float
    vfov_max_deg: float
    horiz_angular_res_deg: float
    max_range_m: float

    def __post_init__(self):
        if self.beam_count < 2:
            raise ValueError(f"beam_count must be >= 2, got {self.beam_count}")
        if not self.vfov_min_deg < self.vfov_max_deg:
            raise ValueError("vfov_min_deg must be < vfov_max_deg")
        if self.horiz_angular_res_deg <= 0:
            raise ValueError("horiz_angular_res_deg must be > 0")
        if self.max_range_m <= 0:
            raise ValueError("max_range_m must be > 0")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered class taxonomy with a reserved unoccupied class."""

    names: tuple
    empty_id: int

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"class names must be distinct: {self.names}")
        if not self.names:
            raise ValueError("label space must contain at least one class")
        if not 0 <= self.empty_id < len(self.names):
            raise ValueError(f"empty_id {self.empty_id} out of range for {len(self.names)} classes")

    def __len__(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)


def _freeze(arr):
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Dense voxel label volume.

    ``labels`` is a (D, H, W) uint16 array; ``origin`` is the world coordinate
    of the (0, 0, 0) voxel corner.
    """

    dims: tuple
    voxel_size_m: float
    origin: tuple
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.origin) != 3 or not all(math.isfinite(v) for v in self.origin):
            raise ValueError(f"origin must be a finite 3-vector, got {self.origin}")
        if not (math.isfinite(self.voxel_size_m) and self.voxel_size_m > 0):
            raise ValueError(f"voxel_size_m must be > 0, got {self.voxel_size_m}")
        if not 1 <= int(self.num_classes) <= 0xFFFF:
            raise ValueError(f"num_classes must be in [1, 65535], got {self.num_classes}")
        labels = np.asarray(self.labels)
        if labels.ndim == 1:
            if labels.size != dims[0] * dims[1] * dims[2]:
                raise ValueError(f"label count {labels.size} does not match dims {dims}")
            labels = labels.reshape(dims)
        if labels.shape != dims:
            raise ValueError(f"label shape {labels.shape} does not match dims {dims}")
        if labels.size and int(labels.max()) >= self.num_classes:
            raise ValueError(
                f"label id {int(labels.max())} exceeds class count {self.num_classes}"
            )
        object.__setattr__(self, "labels", _freeze(labels.astype(np.uint16)))
        object.__setattr__(self, "num_classes", int(self.num_classes))

    def __eq__(self, other):
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.voxel_size_m == other.voxel_size_m
            and self.origin == other.origin
            and self.num_classes == other.num_classes
            and np.array_equal(self.labels, other.labels)
        )

    @property
    def extent(self):
        lo = self.origin
        hi = tuple(o + d * self.voxel_size_m for o, d in zip(self.origin, self.dims))
        return Range3D(lo[0], hi[0], lo[1], hi[1], lo[2], hi[2])


@dataclass(frozen=True, eq=False)
class ScoreGrid:
    """Dense per-voxel class-score volume, shape (D, H, W, num_classes)."""

    dims: tuple
    num_classes: int
    scores: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        scores = np.array(self.scores, dtype=np.float64)
        want = dims + (self.num_classes,)
        if scores.shape != want:
            raise ValueError(f"score shape {scores.shape} does not match {want}")
        if not np.all(np.isfinite(scores)):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "scores", _freeze(scores))

    def __eq__(self, other):
        if not isinstance(other, ScoreGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.num_classes == other.num_classes
            and np.array_equal(self.scores, other.scores)
        )


@dataclass(frozen=True)
class DatasetSpec:
    """Per-dataset sensor, range, grid, and taxonomy configuration."""

    name: str
    lidar: LidarConfig
    point_range: Range3D
    gt_range: Range3D
    grid_dims: tuple
    label_space: LabelSpace

    def __post_init__(self):
        object.__setattr__(self, "grid_dims", tuple(int(d) for d in self.grid_dims))
        if not self.point_range.contains_range(self.gt_range) and self.gt_range != self.point_range:
            raise ValueError(f"{self.name}: gt_range must lie within point_range")
        sizes = self.gt_range.spans / np.asarray(self.grid_dims, dtype=np.float64)
        if not np.allclose(sizes, sizes[0], rtol=1e-9, atol=0.0):
            raise ValueError(
                f"{self.name}: grid_dims {self.grid_dims} do not tile gt_range uniformly "
                f"(per-axis voxel sizes {sizes.tolist()})"
            )

    @property
    def voxel_size_m(self):
        return float(self.gt_range.spans[0] / self.grid_dims[0])


def grid_encode(grid):
    """Serialize an occupancy grid to the MOCC v1 little-endian layout.

    magic "MOCC" | version u16 | D,H,W u32 | voxel_size f64 | origin xyz f64
    | class count u16 | D*H*W labels u16 row-major.
    """
    d, h, w = grid.dims
    header = _MOCC_HEADER.pack(
        MOCC_MAGIC,
        MOCC_VERSION,
        d,
        h,
        w,
        grid.voxel_size_m,
        grid.origin[0],
        grid.origin[1],
        grid.origin[2],
        grid.num_classes,
    )
    return header + grid.labels.astype("<u2").tobytes(order="C")


def grid_decode(data):
    """Inverse of :func:`grid_encode`; validates magic, version, and length."""
    data = bytes(data)
    if len(data) < 4 or data[:4] != MOCC_MAGIC:
        raise BadMagic(f"expected magic {MOCC_MAGIC!r}, got {data[:4]!r}", 0)
    if len(data) < _MOCC_HEADER.size:
        raise TruncatedPayload(
            f"stream ends inside the {_MOCC_HEADER.size}-byte header", len(data)
        )
    magic, version, d, h, w, voxel, ox, oy, oz, classes = _MOCC_HEADER.unpack_from(data, 0)
    if version != MOCC_VERSION:
        raise VersionUnsupported(f"version {version} unsupported (expected {MOCC_VERSION})", 4)
    want = d * h * w * 2
    payload = data[_MOCC_HEADER.size:]
    if len(payload) < want:
        raise TruncatedPayload(
            f"payload holds {len(payload)} of {want} label bytes", len(data)
        )
    if len(payload) > want:
        raise CodecError(f"{len(payload) - want} trailing bytes after payload", _MOCC_HEADER.size + want)
    labels = np.frombuffer(payload, dtype="<u2").reshape(d, h, w)
    return OccupancyGrid(
        dims=(d, h, w),
        voxel_size_m=voxel,
        origin=(ox, oy, oz),
        labels=labels.astype(np.uint16),
        num_classes=classes,
    )
