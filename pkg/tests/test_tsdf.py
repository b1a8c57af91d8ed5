import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssgrasp import tsdf as tsdf_mod
from ssgrasp.geom_core import DepthImage, RigidTransform, backproject, build_kdtree
from ssgrasp.sensor_sim import Primitive, Scene, hemisphere_poses, render_depth
from ssgrasp.tsdf import FusionConfig, TsdfVolume, extract_surface, fuse_views, integrate

VOX = 0.002


def _plane_setup(K):
    # table plane z = 0 seen straight down from 0.3 m; voxel centers lie on z = k*VOX
    scene = Scene((), 0.0)
    (T,) = hemisphere_poses((0, 0, 0), 0.3, 1, (90.0,))
    depth = render_depth(scene, K, T)
    vol = TsdfVolume(np.array([-0.02, -0.02, -0.03 - VOX / 2]), VOX, (20, 20, 30), 4 * VOX)
    return vol, depth, T


def _voxel_at_height(vol, z):
    k = int(round((z - vol.origin[2]) / VOX - 0.5))
    assert abs(vol.origin[2] + (k + 0.5) * VOX - z) < 1e-12
    return 10, 10, k


def test_plane_voxel_is_zero_crossing(K):
    vol, depth, T = _plane_setup(K)
    integrate(vol, depth, K, T)
    i, j, k = _voxel_at_height(vol, 0.0)
    assert abs(vol.tsdf[i, j, k]) < VOX / vol.trunc_dist
    assert vol.weight[i, j, k] == 1


def test_voxel_in_front_is_truncated(K):
    vol, depth, T = _plane_setup(K)
    integrate(vol, depth, K, T)
    i, j, k = _voxel_at_height(vol, 2 * vol.trunc_dist)
    assert vol.tsdf[i, j, k] == 1.0
    assert vol.weight[i, j, k] == 1


def test_voxel_far_behind_untouched(K):
    vol, depth, T = _plane_setup(K)
    integrate(vol, depth, K, T)
    i, j, k = _voxel_at_height(vol, -0.028)
    assert vol.weight[i, j, k] == 0 and vol.tsdf[i, j, k] == 1.0


def test_repeat_frame_fixed_point(K):
    vol, depth, T = _plane_setup(K)
    integrate(vol, depth, K, T)
    once = vol.copy()
    integrate(vol, depth, K, T)
    np.testing.assert_allclose(vol.tsdf, once.tsdf, atol=1e-15)
    assert np.array_equal(vol.weight, 2 * once.weight)


def test_weight_capped(K):
    vol, depth, T = _plane_setup(K)
    vol.w_max = 3.0
    for _ in range(5):
        integrate(vol, depth, K, T)
    assert vol.weight.max() == 3.0


def test_plane_extraction(K):
    vol, depth, T = _plane_setup(K)
    integrate(vol, depth, K, T)
    pc = extract_surface(vol)
    assert len(pc) > 100
    assert np.abs(pc.points[:, 2]).max() < VOX / 2
    np.testing.assert_allclose(pc.normals[:, 2], 1.0, atol=1e-9)


def test_empty_volume_gives_empty_cloud(caplog):
    vol = TsdfVolume(np.zeros(3), VOX, (5, 5, 5), 4 * VOX)
    pc = extract_surface(vol)
    assert len(pc) == 0
    assert "no observed zero crossing" in caplog.text


def test_dimension_mismatch(K):
    from ssgrasp.geom_core import InputError
    vol, _, T = _plane_setup(K)
    with pytest.raises(InputError):
        integrate(vol, DepthImage(np.ones((3, 3))), K, T)


def _box_frames(K, n=6):
    scene = Scene((Primitive.box((0.0, 0.0, 0.03), (0.025, 0.02, 0.03), RigidTransform.rot_z(0.5).rotation),), 0.0)
    poses = hemisphere_poses((0, 0, 0.03), 0.35, n)
    return scene, [(render_depth(scene, K, T), T) for T in poses]


BOX_CFG = FusionConfig(bounds=((-0.06, 0.06), (-0.06, 0.06), (-0.01, 0.08)))


def test_single_frame_fuse_equals_integrate(K):
    _, frames = _box_frames(K, 1)
    a = fuse_views(frames, K, BOX_CFG)
    vol = TsdfVolume.from_bounds(BOX_CFG.bounds, VOX)
    integrate(vol, *frames[0][:1], K, frames[0][1])
    b = extract_surface(vol)
    assert np.array_equal(a.points, b.points)


def test_reversed_order_same_cloud(K):
    _, frames = _box_frames(K, 4)
    a = fuse_views(frames, K, BOX_CFG)
    b = fuse_views(frames[::-1], K, BOX_CFG)
    assert len(a) == len(b)
    pa = a.points[np.lexsort(a.points.T)]
    pb = b.points[np.lexsort(b.points.T)]
    np.testing.assert_allclose(pa, pb, atol=1e-6)


def test_box_surface_error_and_coverage(K):
    scene, frames = _box_frames(K, 8)
    pc = fuse_views(frames, K, BOX_CFG)
    err = np.abs(scene.surface_distance(pc.points))
    assert np.percentile(err, 95) <= VOX
    tree = build_kdtree(pc.points)
    lo = np.array([b[0] for b in BOX_CFG.bounds])
    hi = np.array([b[1] for b in BOX_CFG.bounds])
    for depth, T in frames:
        sv = backproject(depth, K, T).points
        sv = sv[np.all((sv > lo + 2 * VOX) & (sv < hi - 2 * VOX), axis=1)]
        d, _ = tree.query(sv)
        assert np.all(d <= 2 * VOX)


@settings(max_examples=15, deadline=None)
@given(st.lists(st.integers(0, 7), min_size=1, max_size=6))
def test_tsdf_bounded_and_weight_monotone(order):
    from ssgrasp.geom_core import CameraIntrinsics
    K = CameraIntrinsics(60, 60, 32, 24, 64, 48)
    scene = Scene((Primitive.sphere((0, 0, 0.03), 0.03),), 0.0)
    poses = hemisphere_poses((0, 0, 0.03), 0.3, 8)
    vol = TsdfVolume.from_bounds(((-0.04, 0.04), (-0.04, 0.04), (-0.01, 0.07)), 0.004)
    prev = vol.weight.copy()
    for i in order:
        integrate(vol, render_depth(scene, K, poses[i]), K, poses[i])
        assert vol.tsdf.min() >= -1.0 and vol.tsdf.max() <= 1.0
        assert np.all(vol.weight >= prev)
        prev = vol.weight.copy()


def test_numba_and_numpy_integrate_agree(K):
    _, frames = _box_frames(K, 3)
    vols = []
    for kernel in (tsdf_mod._integrate_numba, tsdf_mod._integrate_numpy):
        vol = TsdfVolume.from_bounds(BOX_CFG.bounds, VOX)
        for depth, T in frames:
            T_cw = T.inverse()
            kernel(vol.tsdf, vol.weight, vol.origin, VOX, vol.trunc_dist, vol.w_max,
                   np.ascontiguousarray(T_cw.rotation), T_cw.translation.copy(), depth.data,
                   K.fx, K.fy, K.u0, K.v0)
        vols.append(vol)
    np.testing.assert_allclose(vols[0].tsdf, vols[1].tsdf, atol=1e-12)
    assert np.array_equal(vols[0].weight, vols[1].weight)


def test_volume_save_load(tmp_path, K):
    _, frames = _box_frames(K, 2)
    vol = TsdfVolume.from_bounds(BOX_CFG.bounds, VOX)
    for depth, T in frames:
        integrate(vol, depth, K, T)
    vol.save(tmp_path / "v.tsdf")
    head = (tmp_path / "v.tsdf").read_bytes().split(b"\n", 1)[0].split()
    assert head[0] == b"TSDF1" and len(head) == 8
    back = TsdfVolume.load(tmp_path / "v.tsdf")
    assert back.dims == vol.dims
    np.testing.assert_allclose(back.tsdf, vol.tsdf, atol=1e-6)
    np.testing.assert_allclose(back.weight, vol.weight)
