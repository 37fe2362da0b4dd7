"""Coarse-to-fine refinement: split occupied coarse voxels into fine queries,
sample features trilinearly, reclassify, and reassemble with empty fill."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import OccupancyGrid


class OutOfGrid(ValueError):
    pass


class DimMismatch(ValueError):
    pass


@dataclass(frozen=True)
class VoxelQuerySet:
    """Fine-voxel query coordinates, one block of eta^3 per occupied coarse voxel."""

    coords: np.ndarray
    source: np.ndarray
    eta: int
    coarse_dims: tuple

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        source = np.asarray(self.source, dtype=np.int64).reshape(-1)
        if coords.shape[0] != source.shape[0]:
            raise ValueError("coords and source lengths disagree")
        if self.eta < 1:
            raise ValueError("eta must be >= 1")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "source", source)
        object.__setattr__(self, "coarse_dims", tuple(int(d) for d in self.coarse_dims))

    def __len__(self):
        return self.coords.shape[0]


def occupied_voxels(grid, empty_id=0):
    """Coordinates of all voxels whose label differs from the empty class,
    in deterministic row-major order."""
    return np.argwhere(grid.labels != empty_id).astype(np.int64)


def split_voxels(coarse_coords, eta, coarse_dims):
    """Expand each coarse voxel into its eta^3 fine-coordinate refinement.

    Coarse (x0, y0, z0) yields fine coords (eta*x0 + i, eta*y0 + j, eta*z0 + k)
    for i, j, k in 0..eta-1, block-ordered per source voxel.
    """
    if eta < 1:
        raise ValueError("eta must be >= 1")
    coarse_coords = np.asarray(coarse_coords, dtype=np.int64).reshape(-1, 3)
    n = coarse_coords.shape[0]
    offs = np.stack(
        np.meshgrid(np.arange(eta), np.arange(eta), np.arange(eta), indexing="ij"),
        axis=-1,
    ).reshape(-1, 3)
    coords = (coarse_coords[:, None, :] * eta + offs[None, :, :]).reshape(-1, 3)
    source = np.repeat(np.arange(n, dtype=np.int64), eta**3)
    return VoxelQuerySet(coords=coords, source=source, eta=int(eta), coarse_dims=coarse_dims)


def voxel_to_world(coords, origin, voxel_size):
    """Voxel centers: world = origin + (coord + 0.5) * voxel_size."""
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    return np.asarray(origin, dtype=np.float64)[None, :] + (coords + 0.5) * voxel_size


def world_to_voxel(points, origin, voxel_size, dims):
    """Inverse of voxel_to_world using the floor convention.

    A point exactly on a voxel boundary belongs to the voxel whose low corner
    it touches. Raises OutOfGrid for points outside the grid extent.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((points - np.asarray(origin, dtype=np.float64)[None, :]) / voxel_size)
    idx = idx.astype(np.int64)
    dims = np.asarray(dims, dtype=np.int64)
    bad = np.any((idx < 0) | (idx >= dims[None, :]), axis=1)
    if bad.any():
        k = int(np.argmax(bad))
        raise OutOfGrid(f"point {points[k].tolist()} outside grid of dims {dims.tolist()}")
    return idx


def sample_features(volume, fine_coords, eta):
    """Trilinearly sample a coarse (D, H, W, C) volume at fine-voxel centers.

    Fine coordinate c corresponds to the continuous coarse index
    (c + 0.5) / eta - 0.5, so queries at coarse voxel centers return that
    voxel's features exactly; borders are edge-clamped.
    """
    volume = np.asarray(volume, dtype=np.float64)
    d, h, w, _ = volume.shape
    coords = np.asarray(fine_coords, dtype=np.float64).reshape(-1, 3)
    u = (coords + 0.5) / eta - 0.5
    lo = np.floor(u).astype(np.int64)
    frac = u - lo
    out = None
    dims = np.array([d, h, w], dtype=np.int64)
    for corner in range(8):
        bits = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1], dtype=np.int64)
        idx = np.clip(lo + bits[None, :], 0, (dims - 1)[None, :])
        weight = np.prod(np.where(bits[None, :] == 1, frac, 1.0 - frac), axis=1)
        vals = volume[idx[:, 0], idx[:, 1], idx[:, 2]]
        term = weight[:, None] * vals
        out = term if out is None else out + term
    return out


def refine_and_reassemble(queries, features, fine_head, fine_dims, empty_id,
                          voxel_size, origin):
    """Score each query with the two-layer head and rebuild the fine volume.

    The argmax label of every query lands at its fine coordinate; every
    non-query voxel receives ``empty_id``. ``fine_dims`` must equal
    eta * coarse_dims per axis.
    """
    fine_dims = tuple(int(v) for v in fine_dims)
    want = tuple(d * queries.eta for d in queries.coarse_dims)
    if fine_dims != want:
        raise DimMismatch(f"fine dims {fine_dims} != eta * coarse dims {want}")
    w1, b1, w2, b2 = fine_head
    num_classes = w2.shape[1]
    if not 0 <= empty_id < num_classes:
        raise ValueError(f"empty_id {empty_id} out of range for {num_classes} classes")
    labels = np.full(fine_dims, empty_id, dtype=np.uint16)
    if len(queries):
        scores = (np.asarray(features, dtype=np.float64) @ w1 + b1) @ w2 + b2
        picked = np.argmax(scores, axis=1).astype(np.uint16)
        c = queries.coords
        labels[c[:, 0], c[:, 1], c[:, 2]] = picked
    return OccupancyGrid(
        dims=fine_dims,
        voxel_size_m=float(voxel_size),
        origin=tuple(origin),
        labels=labels,
        num_classes=num_classes,
    )


def identity_fine_head(head_w, head_b):
    """Fine head whose first layer passes features through unchanged and whose
    second layer reuses a coarse classification head."""
    hidden = head_w.shape[0]
    return (np.eye(hidden), np.zeros(hidden), np.asarray(head_w, dtype=np.float64),
            np.asarray(head_b, dtype=np.float64))
