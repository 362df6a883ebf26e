"""Scene generator and LIDAR model tests.

shapely provides an independent oracle for segment-rectangle
intersection; the raycaster is checked per ray against a scalar
edge-intersection loop.
"""

import math

import numpy as np
import pytest
import shapely.geometry as sg

from fscod.geometry import rotate_to_global
from fscod.sim import (
    SceneInfeasibleError,
    SceneParams,
    cast_rays,
    generate_scene,
    segment_intersects_box,
    simulate_lidar,
)
from fscod.types import LidarSpec, OrientedBox, Pose, VehicleBox

SEED = 33000
PARAMS = SceneParams()
SPEC = LidarSpec(range_m=20.0)


def _scene(seed: int, params: SceneParams = PARAMS):
    # generate_scene legitimately refuses seeds whose random placement
    # cannot satisfy the occlusion geometry; callers retry with fresh
    # seeds, so the tests do the same.
    for attempt in range(64):
        try:
            return generate_scene(params, seed=seed + 100000 * attempt)
        except SceneInfeasibleError:
            continue
    raise AssertionError(f"no feasible scene within 64 attempts of seed {seed}")


def _shapely_box(box: OrientedBox) -> sg.Polygon:
    return sg.Polygon(box.corners())


def test_segment_box_intersection_matches_shapely():
    rng = np.random.default_rng(SEED)
    agree_hits = 0
    for _ in range(1000):
        box = OrientedBox(
            rng.uniform(-5, 5), rng.uniform(-5, 5),
            rng.uniform(0.5, 4), rng.uniform(0.5, 8), rng.uniform(-math.pi, math.pi),
        )
        p0 = (rng.uniform(-12, 12), rng.uniform(-12, 12))
        p1 = (rng.uniform(-12, 12), rng.uniform(-12, 12))
        got = segment_intersects_box(p0, p1, box)
        want = sg.LineString([p0, p1]).intersects(_shapely_box(box))
        assert got == want, f"segment {p0}->{p1} vs {box}"
        agree_hits += int(got)
    # the sample must actually exercise both outcomes
    assert 50 < agree_hits < 950


def test_segment_fully_inside_box_counts_as_intersecting():
    box = OrientedBox(0, 0, 4, 6, 0.3)
    assert segment_intersects_box((0.1, 0.1), (-0.1, 0.2), box)


def test_segment_degenerate_point():
    box = OrientedBox(0, 0, 2, 2, 0.0)
    assert segment_intersects_box((0.0, 0.0), (0.0, 0.0), box)
    assert not segment_intersects_box((5.0, 5.0), (5.0, 5.0), box)


def _ray_hit_oracle(origin, angle, boxes, max_range):
    best_t = math.inf
    best_b = -1
    ox, oy = origin
    dx, dy = math.cos(angle), math.sin(angle)
    for bi, vb in enumerate(boxes):
        cs = vb.box.corners()
        for k in range(4):
            ax, ay = cs[k]
            bx, by = cs[(k + 1) % 4]
            ex, ey = bx - ax, by - ay
            denom = dx * ey - dy * ex
            if abs(denom) <= 1e-12:
                continue
            t = ((ax - ox) * ey - (ay - oy) * ex) / denom
            u = ((ax - ox) * dy - (ay - oy) * dx) / denom
            if t > 1e-9 and 0.0 <= u <= 1.0 and t < best_t:
                best_t = t
                best_b = bi
    if best_t > max_range:
        return math.inf, -1
    return best_t, best_b


def test_cast_rays_matches_per_ray_oracle():
    rng = np.random.default_rng(SEED + 1)
    for _ in range(5):
        boxes = [
            VehicleBox(OrientedBox(rng.uniform(-10, 10), rng.uniform(-10, 10),
                                   rng.uniform(1, 3), rng.uniform(3, 7),
                                   rng.uniform(-math.pi, math.pi)), height=2.0)
            for _ in range(4)
        ]
        sensor = Pose(rng.uniform(-3, 3), rng.uniform(-3, 3), yaw=rng.uniform(-3, 3))
        spec = LidarSpec(range_m=20.0, azimuth_step=0.05)
        dirs, dists, hit = cast_rays(sensor, boxes, spec)
        n_rays = int(math.ceil(2 * math.pi / spec.azimuth_step))
        assert dirs.shape == (n_rays, 2) and dists.shape == (n_rays,)
        check = rng.choice(n_rays, size=40, replace=False)
        for r in check:
            angle = sensor.yaw + r * spec.azimuth_step
            want_t, want_b = _ray_hit_oracle((sensor.x, sensor.y), angle, boxes, 20.0)
            if math.isinf(want_t):
                assert math.isinf(dists[r]) and hit[r] == -1
            else:
                assert abs(dists[r] - want_t) < 1e-9
                assert hit[r] == want_b


def test_cast_rays_empty_world():
    dirs, dists, hit = cast_rays(Pose(0, 0), [], SPEC)
    assert np.isinf(dists).all()
    assert (hit == -1).all()


def test_cast_rays_respects_range():
    near = [VehicleBox(OrientedBox(30.0, 0.0, 2, 4, 0.0), height=2.0)]
    _, dists, hit = cast_rays(Pose(0, 0), near, LidarSpec(range_m=20.0))
    assert np.isinf(dists).all() and (hit == -1).all()
    _, dists2, hit2 = cast_rays(Pose(0, 0), near, LidarSpec(range_m=40.0))
    assert np.isfinite(dists2).any() and (hit2 == 0).any()


def test_occlusion_shadows_rear_box():
    # a wall right in front of the sensor hides a box straight behind it
    wall = VehicleBox(OrientedBox(5.0, 0.0, 4.0, 1.0, math.pi / 2), height=3.0)
    hidden = VehicleBox(OrientedBox(10.0, 0.0, 2.0, 2.0, 0.0), height=1.6)
    _, _, hit = cast_rays(Pose(0, 0), [wall, hidden], SPEC)
    assert (hit == 0).any()
    assert not (hit == 1).any()
    # from the far side the previously hidden box is visible
    _, _, hit_far = cast_rays(Pose(20.0, 0.0), [wall, hidden], SPEC)
    assert (hit_far == 1).any()


def test_lidar_points_lie_on_box_edges():
    scene = _scene(101)
    cloud = simulate_lidar(scene, scene.ego_pose, LidarSpec(range_m=20.0, noise_sigma=0.0))
    assert cloud.dtype == np.float32
    assert len(cloud)
    world = rotate_to_global(cloud, scene.ego_pose)
    world[:, 0] += scene.ego_pose.x
    world[:, 1] += scene.ego_pose.y
    polys = [_shapely_box(b.box) for b in scene.all_boxes()]
    for p in world[:: max(1, len(world) // 200)]:
        d = min(poly.exterior.distance(sg.Point(p[0], p[1])) for poly in polys)
        assert d < 1e-4, f"point {p} is {d} m off every box edge"


def test_lidar_elevation_replication_respects_height_and_range():
    # one low car: only elevations at or below 1.6 m may appear
    scene = _scene(7, SceneParams(obstacle_count=(0, 0), target_count=(1, 1)))
    spec = LidarSpec(range_m=20.0, noise_sigma=0.0)
    cloud = simulate_lidar(scene, scene.ego_pose, spec)
    zs = np.unique(np.round(cloud[:, 2], 3))
    allowed = {z for z in spec.elevation_samples if z <= 1.6}
    got = set()
    world_z = cloud[:, 2]  # yaw-only pose keeps z unchanged
    for z in world_z:
        got.add(round(float(z), 1))
    assert got <= {round(z, 1) for z in allowed}
    # 3-d range: planar hits at 19.9 m must lose their upper elevations
    sensor = Pose(0, 0)
    far = [VehicleBox(OrientedBox(19.95, 0.0, 0.5, 6.0, math.pi / 2), height=4.0)]
    scene2 = _scene(8, SceneParams(obstacle_count=(0, 0), target_count=(1, 1)))
    scene2.targets[:] = far
    scene2.obstacles[:] = []
    cloud2 = simulate_lidar(scene2, sensor, spec)
    if len(cloud2):
        d3 = np.linalg.norm(cloud2, axis=1)
        assert float(d3.max()) <= spec.range_m + 1e-5


def test_lidar_noise_is_bounded_and_seeded():
    scene = _scene(55)
    spec = LidarSpec(range_m=20.0, noise_sigma=0.02)
    clean = simulate_lidar(scene, scene.ego_pose, LidarSpec(range_m=20.0, noise_sigma=0.0))
    noisy = simulate_lidar(scene, scene.ego_pose, spec)
    again = simulate_lidar(scene, scene.ego_pose, spec)
    assert np.array_equal(noisy, again)
    assert noisy.shape == clean.shape
    delta = np.linalg.norm(noisy.astype(np.float64) - clean.astype(np.float64), axis=1)
    assert float(delta.max()) <= 6.0 * spec.noise_sigma + 1e-4
    # ego and coop streams differ
    coop = simulate_lidar(scene, scene.coop_pose, spec)
    assert coop.shape != noisy.shape or not np.array_equal(coop, noisy)


def test_scene_generation_is_deterministic():
    a = _scene(303)
    b = _scene(303)
    assert a.ego_pose == b.ego_pose and a.coop_pose == b.coop_pose
    assert len(a.targets) == len(b.targets)
    for ta, tb in zip(a.targets, b.targets):
        assert ta.box == tb.box and ta.height == tb.height
    c = _scene(304)
    assert c.ego_pose != a.ego_pose


def test_scene_respects_counts_ranges_and_separation():
    rng = np.random.default_rng(SEED + 2)
    for seed in rng.integers(0, 100000, 30):
        scene = _scene(int(seed))
        assert PARAMS.target_count[0] <= len(scene.targets) <= PARAMS.target_count[1]
        assert PARAMS.obstacle_count[0] <= len(scene.obstacles) <= PARAMS.obstacle_count[1]
        sep = math.hypot(scene.ego_pose.x - scene.coop_pose.x,
                         scene.ego_pose.y - scene.coop_pose.y)
        assert sep >= PARAMS.min_sensor_separation
        for t in scene.targets:
            d = math.hypot(t.box.cx - scene.ego_pose.x, t.box.cy - scene.ego_pose.y)
            assert d <= PARAMS.max_target_range + 1e-9


def test_scene_boxes_do_not_overlap():
    rng = np.random.default_rng(SEED + 3)
    from fscod.types import boxes_overlap
    for seed in rng.integers(0, 100000, 20):
        scene = _scene(int(seed))
        boxes = [vb.box for vb in scene.all_boxes()]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert not boxes_overlap(boxes[i], boxes[j])


def test_flagged_target_centroid_is_occluded_from_ego():
    rng = np.random.default_rng(SEED + 4)
    checked = 0
    for seed in rng.integers(0, 100000, 50):
        scene = _scene(int(seed))
        assert scene.occluded_target == 0  # obstacles guaranteed by PARAMS
        tgt = scene.targets[0].box
        seg = sg.LineString([scene.ego_pose.xy, (tgt.cx, tgt.cy)])
        assert any(seg.intersects(_shapely_box(o.box)) for o in scene.obstacles)
        checked += 1
    assert checked == 50


def test_no_obstacles_means_no_occlusion_flag():
    scene = _scene(9, SceneParams(obstacle_count=(0, 0)))
    assert scene.occluded_target is None
    assert scene.obstacles == []


def test_infeasible_params_raise():
    # sensors cannot be 100 m apart inside a 24 m box
    bad = SceneParams(
        sensor_region=12.0,
        min_sensor_separation=100.0,
        max_sensor_separation=120.0,
        max_tries=50,
    )
    with pytest.raises(SceneInfeasibleError):
        generate_scene(bad, seed=1)
    with pytest.raises(ValueError):
        SceneParams(min_sensor_separation=10.0, max_sensor_separation=5.0)
