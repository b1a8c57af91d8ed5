"""Time the numba and pure-numpy versions of the two hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both versions are called directly, so the env switch does not matter here.
The first numba call (JIT compile, or cache load) is excluded from timing.
"""
import argparse
import time

import numpy as np

from ssgrasp import sensor_sim, tsdf
from ssgrasp._accel import HAVE_NUMBA
from ssgrasp.dataset import default_templates
from ssgrasp.geom_core import CameraIntrinsics
from ssgrasp.sensor_sim import hemisphere_poses, randomize_scene, render_depth
from ssgrasp.tsdf import FusionConfig, TsdfVolume


def best_of(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is unavailable (or disabled); both columns time the numpy path")

    K = CameraIntrinsics.default()
    scene = randomize_scene(default_templates()[2], 1)
    T = hemisphere_poses((0, 0, 0.03), 0.35, 8)[3]
    dirs = np.ascontiguousarray(K.pixel_rays().reshape(-1, 3) @ T.rotation.T)
    ray_args = (T.translation.copy(), dirs, *sensor_sim._pack(scene), True, 0.0, 0.6)

    depth = render_depth(scene, K, T)
    T_cw = T.inverse()
    cfg = FusionConfig.for_table(0.0)
    template = TsdfVolume.from_bounds(cfg.bounds, cfg.voxel_size)

    def integrate_with(kernel):
        vol = template.copy()
        kernel(vol.tsdf, vol.weight, vol.origin, vol.voxel_size, vol.trunc_dist, vol.w_max,
               np.ascontiguousarray(T_cw.rotation), T_cw.translation.copy(), depth.data,
               K.fx, K.fy, K.u0, K.v0)

    rows = [
        (f"raycast {K.width}x{K.height}, {len(scene.primitives)} primitives + table",
         lambda: sensor_sim._raycast_numba(*ray_args), lambda: sensor_sim._raycast_numpy(*ray_args)),
        (f"tsdf integrate {'x'.join(map(str, template.dims))} voxels",
         lambda: integrate_with(tsdf._integrate_numba), lambda: integrate_with(tsdf._integrate_numpy)),
    ]
    print(f"{'kernel':<50} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, fast, slow in rows:
        a, b = best_of(fast, args.repeat), best_of(slow, args.repeat)
        print(f"{name:<50} {a * 1e3:>10.1f} {b * 1e3:>10.1f} {b / a:>7.1f}x")


if __name__ == "__main__":
    main()
