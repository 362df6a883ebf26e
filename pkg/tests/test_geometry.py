"""Frame alignment, BEV projection, and feature-map shift tests.

Oracles here are deliberately dumber than the implementation: explicit
trig matrices, dict-based histograms, and double-loop index remapping.
"""

import math

import numpy as np
import pytest

from fscod.geometry import (
    BevGrid,
    FeatureMap,
    attitude_matrix,
    bev_counts,
    feature_shift,
    pose_pixel,
    project_bev,
    rot_x,
    rot_y,
    rot_z,
    rotate_to_global,
    translate_featuremap,
)
from fscod.types import Pose

SEED = 20260816


def _oracle_rot(roll, pitch, yaw):
    # sensor-to-world rotation assembled longhand, column-vector form,
    # then transposed for row vectors
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return (rz @ ry @ rx).T


def test_attitude_matrix_matches_longhand_product():
    rng = np.random.default_rng(SEED)
    for _ in range(200):
        roll, pitch, yaw = rng.uniform(-math.pi, math.pi, 3)
        pose = Pose(0.0, 0.0, roll=roll, pitch=min(abs(pitch), 1.5), yaw=yaw)
        got = attitude_matrix(pose)
        want = _oracle_rot(pose.roll, pose.pitch, pose.yaw)
        assert np.allclose(got, want, atol=1e-12)


def test_single_axis_matrices_are_orthonormal():
    rng = np.random.default_rng(SEED + 1)
    for _ in range(100):
        a = rng.uniform(-10, 10)
        for r in (rot_x(a), rot_y(a), rot_z(a)):
            assert np.allclose(r @ r.T, np.eye(3), atol=1e-14)
            assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_yaw_rotation_is_counterclockwise_for_row_vectors():
    # +x axis rotated by +90 degrees must land on +y
    out = np.array([[1.0, 0.0, 0.0]]) @ rot_z(math.pi / 2)
    assert np.allclose(out, [[0.0, 1.0, 0.0]], atol=1e-15)


def test_rotation_preserves_norms_and_inverts():
    rng = np.random.default_rng(SEED + 2)
    for _ in range(50):
        cloud = rng.normal(scale=8.0, size=(64, 3))
        pose = Pose(
            rng.uniform(-5, 5), rng.uniform(-5, 5),
            roll=rng.uniform(-0.2, 0.2), pitch=rng.uniform(-0.2, 0.2),
            yaw=rng.uniform(-math.pi, math.pi),
        )
        out = rotate_to_global(cloud, pose)
        assert out.dtype == np.float64
        n0 = np.linalg.norm(cloud, axis=1)
        n1 = np.linalg.norm(out, axis=1)
        assert np.abs(n0 - n1).max() <= 1e-12
        back = out @ attitude_matrix(pose).T
        assert np.abs(back - cloud).max() <= 1e-12


def test_yaw_only_rotation_matches_planar_formula():
    rng = np.random.default_rng(SEED + 3)
    for _ in range(100):
        yaw = rng.uniform(-math.pi, math.pi)
        p = rng.uniform(-10, 10, size=(1, 3))
        out = rotate_to_global(p, Pose(0.0, 0.0, yaw=yaw))
        c, s = math.cos(yaw), math.sin(yaw)
        assert abs(out[0, 0] - (p[0, 0] * c - p[0, 1] * s)) < 1e-12
        assert abs(out[0, 1] - (p[0, 0] * s + p[0, 1] * c)) < 1e-12
        assert abs(out[0, 2] - p[0, 2]) < 1e-15


def test_rotate_rejects_bad_clouds():
    with pytest.raises(ValueError):
        rotate_to_global(np.zeros((4, 2)), Pose(0, 0))
    with pytest.raises(ValueError):
        rotate_to_global(np.array([[0.0, np.nan, 0.0]]), Pose(0, 0))


def test_grid_resolution_presets():
    assert BevGrid(extent_m=20.0, size=128).resolution == pytest.approx(3.2)
    assert BevGrid(extent_m=10.0, size=128).resolution == pytest.approx(6.4)
    assert BevGrid(extent_m=20.0).num_bins == 3


def test_grid_validation():
    with pytest.raises(ValueError):
        BevGrid(extent_m=-1.0)
    with pytest.raises(ValueError):
        BevGrid(extent_m=10.0, size=0)
    with pytest.raises(ValueError):
        BevGrid(extent_m=10.0, bin_edges=(4.0, 2.0))
    with pytest.raises(ValueError):
        BevGrid(extent_m=10.0, n_max=0)


def _oracle_counts(cloud, grid):
    # dict histogram with scalar floors
    hist = {}
    for x, y, z in cloud:
        px = math.floor((x + grid.extent_m) * grid.resolution)
        py = math.floor((y + grid.extent_m) * grid.resolution)
        if not (0 <= px < grid.size and 0 <= py < grid.size):
            continue
        b = 0
        for edge in grid.bin_edges:
            if z >= edge:
                b += 1
        hist[(px, py, b)] = hist.get((px, py, b), 0) + 1
    out = np.zeros((grid.size, grid.size, grid.num_bins), dtype=np.int64)
    for (px, py, b), n in hist.items():
        out[px, py, b] = n
    return out


def test_bev_counts_matches_dict_histogram():
    rng = np.random.default_rng(SEED + 4)
    grid = BevGrid(extent_m=20.0, size=128)
    for _ in range(20):
        n = int(rng.integers(0, 4000))
        cloud = np.column_stack([
            rng.uniform(-25, 25, n),  # some points beyond the extent
            rng.uniform(-25, 25, n),
            rng.uniform(-1, 6, n),
        ])
        got = bev_counts(cloud, grid)
        want = _oracle_counts(cloud, grid)
        assert np.array_equal(got, want)
        inside = (np.abs(cloud[:, 0]) < 20) & (np.abs(cloud[:, 1]) < 20)
        assert got.sum() == int(inside.sum())


def test_bev_counts_height_bin_edges_are_half_open():
    grid = BevGrid(extent_m=10.0, size=128)
    cloud = np.array([
        [0.0, 0.0, 1.999], [0.0, 0.0, 2.0], [0.0, 0.0, 3.999],
        [0.0, 0.0, 4.0], [0.0, 0.0, 9.0], [0.0, 0.0, -0.5],
    ])
    counts = bev_counts(cloud, grid)
    px = math.floor(10.0 * grid.resolution)
    assert counts[px, px, 0] == 2  # below 2 m, ground echo included
    assert counts[px, px, 1] == 2  # [2, 4)
    assert counts[px, px, 2] == 2  # 4 m and up


def test_bev_counts_empty_cloud():
    grid = BevGrid(extent_m=10.0, size=64)
    assert bev_counts(np.zeros((0, 3)), grid).sum() == 0


def test_project_bev_normalizes_and_saturates():
    grid = BevGrid(extent_m=10.0, size=64, n_max=32)
    # 40 points into one pixel/bin: saturates at 1; 8 points: 0.25
    cloud = np.concatenate([
        np.tile([[1.05, 1.05, 0.5]], (40, 1)),
        np.tile([[-3.05, 2.05, 2.5]], (8, 1)),
    ])
    img = project_bev(cloud, grid)
    assert img.data.dtype == np.float32
    px1 = math.floor((1.05 + 10) * grid.resolution)
    px2 = math.floor((-3.05 + 10) * grid.resolution)
    py2 = math.floor((2.05 + 10) * grid.resolution)
    assert img.data[px1, px1, 0] == pytest.approx(1.0)
    assert img.data[px2, py2, 1] == pytest.approx(8 / 32)
    assert float(img.data.max()) <= 1.0


def test_pose_pixel_matches_scalar_floor():
    rng = np.random.default_rng(SEED + 5)
    grid = BevGrid(extent_m=20.0, size=128)
    for _ in range(10000):
        pose = Pose(rng.uniform(-50, 50), rng.uniform(-50, 50))
        px, py = pose_pixel(pose, grid)
        assert px == math.floor(pose.x * grid.resolution)
        assert py == math.floor(pose.y * grid.resolution)


def test_feature_shift_matches_floor_division_oracle():
    rng = np.random.default_rng(SEED + 6)
    grid = BevGrid(extent_m=20.0, size=128)
    for s in (8, 16):
        for _ in range(5000):
            ego = Pose(rng.uniform(-30, 30), rng.uniform(-30, 30))
            coop = Pose(rng.uniform(-30, 30), rng.uniform(-30, 30))
            dx, dy = feature_shift(ego, coop, grid, s)
            ex, ey = pose_pixel(ego, grid)
            cx, cy = pose_pixel(coop, grid)
            assert dx == math.floor(ex / s) - math.floor(cx / s)
            assert dy == math.floor(ey / s) - math.floor(cy / s)


def test_feature_shift_steps_by_one_per_cell_of_motion():
    grid = BevGrid(extent_m=20.0, size=128)
    s = 8
    cell_m = s / grid.resolution
    # poses placed mid-pixel so float noise cannot flip the floor
    base = Pose((3 + 0.5) / grid.resolution, (7 + 0.5) / grid.resolution)
    for k in range(-6, 7):
        moved = Pose(base.x + k * cell_m, base.y)
        dx, dy = feature_shift(base, moved, grid, s)
        assert (dx, dy) == (-k, 0)


def test_zero_shift_for_same_pose():
    grid = BevGrid(extent_m=20.0, size=128)
    pose = Pose(4.3, -2.7, yaw=1.0)
    fm = FeatureMap(
        values=np.random.default_rng(0).normal(size=(4, 16, 16)).astype(np.float32),
        s=8, origin_pose=pose, grid=grid,
    )
    out = translate_featuremap(fm, pose, pose)
    assert np.array_equal(out.values, fm.values)
    assert not out.no_overlap


def _oracle_translate(values, dx, dy):
    c, h, w = values.shape
    out = np.zeros_like(values)
    for x in range(h):
        for y in range(w):
            sx, sy = x + dx, y + dy
            if 0 <= sx < h and 0 <= sy < w:
                out[:, x, y] = values[:, sx, sy]
    return out


def test_translate_matches_double_loop_oracle():
    rng = np.random.default_rng(SEED + 7)
    grid = BevGrid(extent_m=20.0, size=128)
    s = 8
    cell_m = s / grid.resolution
    for _ in range(60):
        values = rng.normal(size=(3, 16, 16)).astype(np.float32)
        ego = Pose(rng.uniform(-12, 12), rng.uniform(-12, 12))
        coop = Pose(rng.uniform(-12, 12), rng.uniform(-12, 12))
        fm = FeatureMap(values=values, s=s, origin_pose=coop, grid=grid)
        out = translate_featuremap(fm, ego, coop)
        dx, dy = feature_shift(ego, coop, grid, s)
        assert np.array_equal(out.values, _oracle_translate(values, dx, dy))
        assert out.origin_pose == ego
        # vacated cells are exactly zero
        if dx > 0:
            assert not out.values[:, 16 - dx :, :].any()
        elif dx < 0:
            assert not out.values[:, : -dx, :].any()


def test_translate_with_no_overlap_flags_and_zeroes():
    grid = BevGrid(extent_m=20.0, size=128)
    values = np.ones((2, 16, 16), dtype=np.float32)
    fm = FeatureMap(values=values, s=8, origin_pose=Pose(500.0, 0.0), grid=grid)
    out = translate_featuremap(fm, Pose(0.0, 0.0), Pose(500.0, 0.0))
    assert out.no_overlap
    assert not out.values.any()


def test_translate_adjoint_dot_product_identity():
    # <T(a), b> == <a, T'(b)> where T' swaps the pose arguments; this is
    # the identity the training backward pass relies on
    rng = np.random.default_rng(SEED + 8)
    grid = BevGrid(extent_m=20.0, size=128)
    for _ in range(40):
        a = rng.normal(size=(3, 16, 16)).astype(np.float32)
        b = rng.normal(size=(3, 16, 16)).astype(np.float32)
        ego = Pose(rng.uniform(-12, 12), rng.uniform(-12, 12))
        coop = Pose(rng.uniform(-12, 12), rng.uniform(-12, 12))
        ta = translate_featuremap(FeatureMap(a, 8, coop, grid), ego, coop).values
        tb = translate_featuremap(FeatureMap(b, 8, ego, grid), coop, ego).values
        lhs = float(np.dot(ta.ravel().astype(np.float64), b.ravel().astype(np.float64)))
        rhs = float(np.dot(a.ravel().astype(np.float64), tb.ravel().astype(np.float64)))
        assert lhs == pytest.approx(rhs, abs=1e-6)


def test_featuremap_validates_shape():
    grid = BevGrid(extent_m=20.0, size=128)
    with pytest.raises(ValueError):
        FeatureMap(values=np.zeros((2, 15, 16), dtype=np.float32), s=8,
                   origin_pose=Pose(0, 0), grid=grid)
    with pytest.raises(ValueError):
        FeatureMap(values=np.zeros((2, 16, 16), dtype=np.float32), s=7,
                   origin_pose=Pose(0, 0), grid=grid)
