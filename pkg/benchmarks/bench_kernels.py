#!/usr/bin/env python3
"""Benchmark the ray-march kernel: numba JIT path vs pure-numpy fallback.

Both paths compute positions and voxel indices with identical floating-point
expressions, so their outputs must match bit-for-bit. Run with
MDOCC_NO_NUMBA=1 to see the package-wide fallback selection instead of the
side-by-side comparison done here.
"""

import time

import numpy as np

from mdocc.kernels import NUMBA_ENABLED, _march_rays_numpy, march_rays
from mdocc.scenes import beam_directions, default_scene_spec, default_sensor_pose, gen_scene
from mdocc.core import LidarConfig


def main():
    print(f"numba enabled: {NUMBA_ENABLED}")
    scene = gen_scene(default_scene_spec(seed=123))
    lidar = LidarConfig(
        beam_count=64, vfov_min_deg=-23.6, vfov_max_deg=3.2,
        horiz_angular_res_deg=0.5, max_range_m=20.0,
    )
    pose = default_sensor_pose(scene)
    dirs = beam_directions(lidar)
    step = scene.voxel_size_m / 2.0
    n_steps = int(np.floor(lidar.max_range_m / step))
    args = (pose, dirs, step, n_steps, np.ascontiguousarray(scene.labels),
            np.asarray(scene.origin), scene.voxel_size_m, 0)
    print(f"rays: {dirs.shape[0]}, max steps per ray: {n_steps}")

    if NUMBA_ENABLED:
        march_rays(*args)  # warm the JIT cache before timing
        t0 = time.perf_counter()
        for _ in range(5):
            jit_hits = march_rays(*args)
        t_jit = (time.perf_counter() - t0) / 5
        print(f"numba path:  {t_jit * 1e3:8.2f} ms/cloud")
    else:
        jit_hits = None
        print("numba path:  unavailable (install numba or unset MDOCC_NO_NUMBA)")

    t0 = time.perf_counter()
    for _ in range(3):
        np_hits = _march_rays_numpy(*[np.asarray(a, dtype=np.float64) if i in (0, 1, 5) else a
                                      for i, a in enumerate(args)])
    t_np = (time.perf_counter() - t0) / 3
    print(f"numpy path:  {t_np * 1e3:8.2f} ms/cloud")

    if jit_hits is not None:
        same = np.array_equal(jit_hits, np_hits)
        print(f"outputs bit-identical: {same}")
        print(f"speedup: {t_np / t_jit:.1f}x")
        if not same:
            raise SystemExit("kernel paths disagree")


if __name__ == "__main__":
    main()
