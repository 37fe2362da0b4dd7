"""Hot numeric kernels: numba-compiled loops with a pure-numpy fallback.

The fallback is selected automatically when numba is not importable, or
explicitly by setting the environment variable ``MDOCC_NO_NUMBA=1`` before
import. Both paths compute positions and voxel indices with the exact same
floating-point expressions, so their outputs are bit-identical;
``benchmarks/bench_kernels.py`` compares their runtimes and checks equality.
"""

from __future__ import annotations

import math
import os

import numpy as np


def _env_disabled():
    return os.environ.get("MDOCC_NO_NUMBA", "").strip() not in ("", "0")


try:
    if _env_disabled():
        raise ImportError("numba disabled via MDOCC_NO_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    njit = None
    NUMBA_ENABLED = False


def _march_rays_loop(pose, dirs, step, n_steps, labels, grid_origin, voxel, empty_id):
    n = dirs.shape[0]
    nd, nh, nw = labels.shape
    hits = np.full((n, 3), -1, np.int64)
    for r in range(n):
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        for s in range(1, n_steps + 1):
            t = step * s
            px = pose[0] + dx * t
            py = pose[1] + dy * t
            pz = pose[2] + dz * t
            ix = int(math.floor((px - grid_origin[0]) / voxel))
            iy = int(math.floor((py - grid_origin[1]) / voxel))
            iz = int(math.floor((pz - grid_origin[2]) / voxel))
            if ix < 0 or ix >= nd or iy < 0 or iy >= nh or iz < 0 or iz >= nw:
                # rays start inside the (convex) grid, so leaving it is final
                break
            if labels[ix, iy, iz] != empty_id:
                hits[r, 0] = ix
                hits[r, 1] = iy
                hits[r, 2] = iz
                break
    return hits


def _march_rays_numpy(pose, dirs, step, n_steps, labels, grid_origin, voxel, empty_id):
    n = dirs.shape[0]
    nd, nh, nw = labels.shape
    hits = np.full((n, 3), -1, np.int64)
    active = np.arange(n)
    for s in range(1, n_steps + 1):
        if active.size == 0:
            break
        t = step * s
        p = pose[None, :] + dirs[active] * t
        idx = np.floor((p - grid_origin[None, :]) / voxel).astype(np.int64)
        inside = (
            (idx[:, 0] >= 0)
            & (idx[:, 0] < nd)
            & (idx[:, 1] >= 0)
            & (idx[:, 1] < nh)
            & (idx[:, 2] >= 0)
            & (idx[:, 2] < nw)
        )
        active = active[inside]
        idx = idx[inside]
        if active.size == 0:
            break
        hit = labels[idx[:, 0], idx[:, 1], idx[:, 2]] != empty_id
        hits[active[hit]] = idx[hit]
        active = active[~hit]
    return hits


if NUMBA_ENABLED:
    _march_rays_numba = njit(cache=True)(_march_rays_loop)


def march_rays(pose, dirs, step, n_steps, labels, grid_origin, voxel, empty_id):
    """March every ray in uniform steps and return first-hit voxel indices.

    Samples positions ``pose + dir * (step * s)`` for s = 1..n_steps and stops
    a ray at the first in-grid sample whose label differs from ``empty_id``,
    or when the sample leaves the grid. Returns an (N, 3) int64 array with
    rows of -1 for rays that hit nothing.
    """
    pose = np.ascontiguousarray(pose, dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.uint16)
    grid_origin = np.ascontiguousarray(grid_origin, dtype=np.float64)
    if NUMBA_ENABLED:
        return _march_rays_numba(
            pose, dirs, float(step), int(n_steps), labels, grid_origin, float(voxel), int(empty_id)
        )
    return _march_rays_numpy(
        pose, dirs, float(step), int(n_steps), labels, grid_origin, float(voxel), int(empty_id)
    )
