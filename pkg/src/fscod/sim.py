"""Synthetic scene generator and planar-sweep LIDAR model.

The world is a square of half-width `extent` containing rectangular
vehicles (targets) and taller rectangular obstacles. Two sensing poses,
ego and coop, observe it; they are mathematical points with no footprint.
The sensor sweeps a full circle of rays in its own frame, finds the
nearest box edge per ray, and replicates each planar hit at every
configured elevation not exceeding the hit box's height. Scenes generated
with at least one obstacle always contain a target whose centroid is
hidden from the ego sensor.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .geometry import attitude_matrix
from .types import LidarSpec, OrientedBox, Pose, Scene, VehicleBox, boxes_overlap


class SceneInfeasibleError(RuntimeError):
    """Placement constraints could not be satisfied within the retry budget."""


@dataclass(frozen=True)
class SceneParams:
    """Knobs for generate_scene. Ranges are inclusive."""

    extent: float = 20.0
    target_count: tuple[int, int] = (2, 5)
    obstacle_count: tuple[int, int] = (1, 2)
    max_target_range: float = 17.0
    sensor_region: float = 12.0
    min_sensor_separation: float = 8.0
    max_sensor_separation: float = 18.0
    car_w: tuple[float, float] = (1.9, 2.3)
    car_l: tuple[float, float] = (4.3, 5.0)
    car_height: float = 1.6
    obstacle_w: tuple[float, float] = (2.2, 3.0)
    obstacle_l: tuple[float, float] = (5.0, 8.0)
    obstacle_height: tuple[float, float] = (2.5, 3.5)
    clearance: float = 0.4
    max_tries: int = 2000

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError(f"extent must be positive, got {self.extent}")
        for name in ("target_count", "obstacle_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range invalid: ({lo}, {hi})")
        if self.target_count[1] < 1:
            raise ValueError("need at least one target")
        if self.max_target_range <= 0 or self.max_target_range > 2 * self.extent:
            raise ValueError(f"max_target_range invalid: {self.max_target_range}")
        if not 0 < self.min_sensor_separation <= self.max_sensor_separation:
            raise ValueError(
                "sensor separation range invalid: "
                f"({self.min_sensor_separation}, {self.max_sensor_separation})"
            )


def segment_intersects_box(p0, p1, box: OrientedBox) -> bool:
    """Liang-Barsky test of segment p0->p1 against an oriented rectangle."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)

    def to_local(p):
        dx, dy = p[0] - box.cx, p[1] - box.cy
        return (c * dx + s * dy, -s * dx + c * dy)

    x0, y0 = to_local(p0)
    x1, y1 = to_local(p1)
    dx, dy = x1 - x0, y1 - y0
    hl, hw = box.l / 2.0, box.w / 2.0
    t0, t1 = 0.0, 1.0
    for p, q in (
        (-dx, x0 + hl),
        (dx, hl - x0),
        (-dy, y0 + hw),
        (dy, hw - y0),
    ):
        if p == 0.0:
            if q < 0.0:
                return False
        else:
            r = q / p
            if p < 0.0:
                if r > t1:
                    return False
                if r > t0:
                    t0 = r
            else:
                if r < t0:
                    return False
                if r < t1:
                    t1 = r
    return t0 <= t1


def _centroid_occluded(sensor_xy, box: OrientedBox, obstacles) -> bool:
    target = (box.cx, box.cy)
    return any(segment_intersects_box(sensor_xy, target, o.box) for o in obstacles)


def _clears_sensors(box: OrientedBox, sensors, clearance: float) -> bool:
    pts = np.array(sensors, dtype=np.float64)
    return not box.contains(pts, margin=clearance).any()


def _fits(box: OrientedBox, placed, extent: float, clearance: float) -> bool:
    if np.abs(box.corners()).max() > extent:
        return False
    return not any(boxes_overlap(box, other.box, margin=clearance) for other in placed)


def _place_blocker(rng, params: SceneParams, ego, coop, target_box, sensors):
    """Drop an obstacle on the ego-to-target ray so the target centroid is
    hidden from ego but stays visible from the second sensor. Returns None
    when no jitter of position and shape achieves that."""
    to_t = np.array([target_box.cx - ego.x, target_box.cy - ego.y])
    d = float(np.hypot(*to_t))
    if d < 1e-6:
        return None
    u = to_t / d
    perp = np.array([-u[1], u[0]])
    target = VehicleBox(target_box, height=params.car_height)
    for _ in range(128):
        frac = float(rng.uniform(0.4, 0.75))
        side = float(rng.uniform(-1.0, 1.0))
        pos = np.array(ego.xy) + u * (frac * d) + perp * side
        box = OrientedBox(
            cx=float(pos[0]),
            cy=float(pos[1]),
            w=float(rng.uniform(*params.obstacle_w)),
            l=float(rng.uniform(*params.obstacle_l)),
            yaw=float(rng.uniform(-math.pi, math.pi)),
        )
        vb = VehicleBox(box, height=float(rng.uniform(*params.obstacle_height)))
        if not (
            _fits(box, [target], params.extent, params.clearance)
            and _clears_sensors(box, sensors, 1.0)
        ):
            continue
        if not _centroid_occluded(ego.xy, target_box, [vb]):
            continue
        if _centroid_occluded(coop.xy, target_box, [vb]):
            continue
        return vb
    return None


def generate_scene(params: SceneParams, seed: int) -> Scene:
    """Deterministically generate one scene from a seed.

    With a nonzero obstacle budget the first target is placed behind a
    randomly chosen obstacle as seen from ego, and the scene records its
    index in occluded_target; with an all-zero obstacle range the flag is
    None. Every target is confined to the window both sensors map, and
    the designated occluded target keeps a clear line of sight from the
    second sensor, so that subset isolates what sharing can recover
    rather than what geometry happens to hide from everyone. Raises
    SceneInfeasibleError when placement cannot satisfy the non-overlap
    and range constraints.
    """
    if seed < 0:
        raise ValueError(f"seed must be >= 0, got {seed}")
    rng = np.random.default_rng(seed)
    r = params.sensor_region

    ego_xy = rng.uniform(-r, r, size=2)
    for _ in range(params.max_tries):
        coop_xy = rng.uniform(-r, r, size=2)
        d = float(np.hypot(*(coop_xy - ego_xy)))
        if params.min_sensor_separation <= d <= params.max_sensor_separation:
            break
    else:
        raise SceneInfeasibleError(f"could not separate sensors (seed {seed})")
    ego = Pose(float(ego_xy[0]), float(ego_xy[1]), yaw=float(rng.uniform(-math.pi, math.pi)))
    coop = Pose(float(coop_xy[0]), float(coop_xy[1]), yaw=float(rng.uniform(-math.pi, math.pi)))
    sensors = [ego.xy, coop.xy]

    n_obs = int(rng.integers(params.obstacle_count[0], params.obstacle_count[1] + 1))
    n_tgt = int(rng.integers(params.target_count[0], params.target_count[1] + 1))

    targets: list[VehicleBox] = []
    obstacles: list[VehicleBox] = []
    occluded: int | None = None

    def car_dims():
        return (
            float(rng.uniform(*params.car_w)),
            float(rng.uniform(*params.car_l)),
            float(rng.uniform(-math.pi, math.pi)),
        )

    def in_coop_window(box: OrientedBox) -> bool:
        # same 3 m margin as the world clamp; keeps the whole footprint
        # inside the map the second sensor will transmit
        return (
            max(abs(box.cx - coop.x), abs(box.cy - coop.y))
            <= params.extent - 3.0
        )

    if n_obs > 0:
        # Showcase pair: the target goes down first, then a blocker lands
        # on the ego ray, so the placement succeeds by construction
        # instead of by rejection.
        for _ in range(params.max_tries):
            w, l, yaw = car_dims()
            ang = float(rng.uniform(-math.pi, math.pi))
            dist = float(rng.uniform(7.0, params.max_target_range))
            box = OrientedBox(
                cx=float(ego.x + math.cos(ang) * dist),
                cy=float(ego.y + math.sin(ang) * dist),
                w=w,
                l=l,
                yaw=yaw,
            )
            if not in_coop_window(box):
                continue
            if not (
                _fits(box, [], params.extent, params.clearance)
                and _clears_sensors(box, sensors, 1.0)
            ):
                continue
            blocker = _place_blocker(rng, params, ego, coop, box, sensors)
            if blocker is None:
                continue
            targets.append(VehicleBox(box, height=params.car_height))
            obstacles.append(blocker)
            occluded = 0
            break
        else:
            raise SceneInfeasibleError(f"could not stage occluded target (seed {seed})")

    while len(obstacles) < n_obs:
        for _ in range(params.max_tries):
            box = OrientedBox(
                cx=float(rng.uniform(-params.extent + 4, params.extent - 4)),
                cy=float(rng.uniform(-params.extent + 4, params.extent - 4)),
                w=float(rng.uniform(*params.obstacle_w)),
                l=float(rng.uniform(*params.obstacle_l)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
            )
            vb = VehicleBox(box, height=float(rng.uniform(*params.obstacle_height)))
            if not (
                _fits(box, obstacles + targets, params.extent, params.clearance)
                and _clears_sensors(box, sensors, 1.0)
            ):
                continue
            # free obstacles must not cost the second sensor its sight line
            if targets and _centroid_occluded(coop.xy, targets[0].box, [vb]):
                continue
            obstacles.append(vb)
            break
        else:
            raise SceneInfeasibleError(f"could not place obstacle (seed {seed})")

    while len(targets) < n_tgt:
        for _ in range(params.max_tries):
            w, l, yaw = car_dims()
            box = OrientedBox(
                cx=float(rng.uniform(-params.extent + 3, params.extent - 3)),
                cy=float(rng.uniform(-params.extent + 3, params.extent - 3)),
                w=w,
                l=l,
                yaw=yaw,
            )
            if math.hypot(box.cx - ego.x, box.cy - ego.y) > params.max_target_range:
                continue
            if not in_coop_window(box):
                continue
            if _fits(
                box, obstacles + targets, params.extent, params.clearance
            ) and _clears_sensors(box, sensors, 1.0):
                targets.append(VehicleBox(box, height=params.car_height))
                break
        else:
            raise SceneInfeasibleError(f"could not place target (seed {seed})")

    return Scene(
        ego_pose=ego,
        coop_pose=coop,
        targets=targets,
        obstacles=obstacles,
        extent=params.extent,
        seed=seed,
        occluded_target=occluded,
    )


def cast_rays(
    sensor: Pose, boxes: list[VehicleBox], spec: LidarSpec
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sweep rays in the sensor frame and intersect with box footprints.

    Returns (directions, distances, hit_index): world-frame unit
    directions (R, 2), nearest edge distance per ray (inf when nothing in
    range), and the index into `boxes` of the hit box (-1 when none).
    """
    n_rays = int(math.ceil(2.0 * math.pi / spec.azimuth_step))
    angles = sensor.yaw + np.arange(n_rays) * spec.azimuth_step
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R, 2)
    origin = np.array([sensor.x, sensor.y], dtype=np.float64)

    dists = np.full(n_rays, np.inf)
    hit = np.full(n_rays, -1, dtype=np.int64)
    if boxes:
        corners = np.stack([vb.box.corners() for vb in boxes])  # (B, 4, 2)
        a = corners.reshape(-1, 2)  # (E, 2), E = 4B
        b = np.roll(corners, -1, axis=1).reshape(-1, 2)
        e = b - a  # edge vectors
        ao = a - origin  # (E, 2)
        # o + t*d = a + u*e; cross products solve for t, u
        denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]  # (R, E)
        t_num = ao[None, :, 0] * e[None, :, 1] - ao[None, :, 1] * e[None, :, 0]
        u_num = ao[None, :, 0] * dirs[:, 1:2] - ao[None, :, 1] * dirs[:, 0:1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = t_num / denom
            u = u_num / denom
        ok = (np.abs(denom) > 1e-12) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
        t = np.where(ok, t, np.inf)
        nearest = t.argmin(axis=1)
        dists = t[np.arange(n_rays), nearest]
        hit = np.where(np.isfinite(dists), nearest // 4, -1)
    in_range = dists <= spec.range_m
    dists = np.where(in_range, dists, np.inf)
    hit = np.where(in_range, hit, -1)
    return dirs, dists, hit


def simulate_lidar(
    scene: Scene,
    sensor: Pose,
    spec: LidarSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Synthesize one sweep from `sensor`. Returns an (N, 3) float32 cloud
    in the sensor-local frame (sensor at origin, x along its heading).

    Each planar hit is replicated at every elevation sample that does not
    exceed the hit box's height, provided the three-dimensional distance
    stays within range. Gaussian noise (sigma = spec.noise_sigma, norm
    capped at 6 sigma) is added in the local frame. With rng omitted the
    noise stream is derived from the scene seed and the sensor pose, so
    repeated calls are identical.
    """
    if rng is None:
        key = zlib.crc32(struct.pack("<3d", sensor.x, sensor.y, sensor.yaw))
        rng = np.random.default_rng([scene.seed, key])
    boxes = scene.all_boxes()
    dirs, dists, hit = cast_rays(sensor, boxes, spec)
    sel = np.nonzero(hit >= 0)[0]
    if sel.size == 0:
        return np.zeros((0, 3), dtype=np.float32)

    heights = np.array([b.height for b in boxes])[hit[sel]]
    elev = np.asarray(spec.elevation_samples, dtype=np.float64)
    keep = elev[None, :] <= heights[:, None]  # (hits, Z)
    d3 = np.hypot(dists[sel, None], elev[None, :] - sensor.z)
    keep &= d3 <= spec.range_m
    h_idx, z_idx = np.nonzero(keep)
    if h_idx.size == 0:
        return np.zeros((0, 3), dtype=np.float32)

    world_xy = np.array([sensor.x, sensor.y]) + dirs[sel] * dists[sel, None]
    pts = np.empty((h_idx.size, 3), dtype=np.float64)
    pts[:, :2] = world_xy[h_idx]
    pts[:, 2] = elev[z_idx]

    # world -> sensor-local: translate, then undo the attitude
    pts -= np.array([sensor.x, sensor.y, sensor.z])
    pts = pts @ attitude_matrix(sensor).T

    if spec.noise_sigma > 0:
        noise = rng.normal(0.0, spec.noise_sigma, size=pts.shape)
        norms = np.linalg.norm(noise, axis=1, keepdims=True)
        cap = 6.0 * spec.noise_sigma
        scale = np.where(norms > cap, cap / np.maximum(norms, 1e-300), 1.0)
        pts += noise * scale
    return pts.astype(np.float32)
