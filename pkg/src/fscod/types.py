"""Shared plain-data types: poses, oriented boxes, scenes, sensor spec."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    r = math.remainder(float(a), math.tau)
    if r <= -math.pi:
        r = math.pi
    return r


@dataclass(frozen=True)
class Pose:
    """Vehicle pose in the world frame.

    Angles are radians, wrapped to (-pi, pi] on construction. z is the
    sensor height above ground and may not be negative.
    """

    x: float
    y: float
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        if self.z < 0:
            raise ValueError(f"pose z must be >= 0, got {self.z}")
        object.__setattr__(self, "roll", normalize_angle(self.roll))
        object.__setattr__(self, "pitch", normalize_angle(self.pitch))
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def xy(self) -> tuple[float, float]:
        return (self.x, self.y)


@dataclass(frozen=True)
class OrientedBox:
    """Rectangular footprint on the ground plane.

    l is the extent along the heading (local x at yaw=0), w the lateral
    extent. yaw is wrapped to (-pi, pi].
    """

    cx: float
    cy: float
    w: float
    l: float
    yaw: float = 0.0

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0):
            raise ValueError(f"box sides must be positive, got w={self.w} l={self.l}")
        object.__setattr__(self, "yaw", normalize_angle(self.yaw))

    @property
    def area(self) -> float:
        return self.w * self.l

    def corners(self) -> np.ndarray:
        """Footprint corners, counterclockwise, shape (4, 2) float64."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        hl, hw = self.l / 2.0, self.w / 2.0
        local = np.array(
            [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]], dtype=np.float64
        )
        rot = np.array([[c, -s], [s, c]], dtype=np.float64)
        return local @ rot.T + np.array([self.cx, self.cy])

    def translated(self, dx: float, dy: float) -> "OrientedBox":
        return OrientedBox(self.cx + dx, self.cy + dy, self.w, self.l, self.yaw)

    def contains(self, pts: np.ndarray, margin: float = 0.0) -> np.ndarray:
        """Boolean mask of (N, 2) points inside the footprint (inclusive)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = pts[:, 0] - self.cx
        dy = pts[:, 1] - self.cy
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        return (np.abs(lx) <= self.l / 2.0 + margin) & (np.abs(ly) <= self.w / 2.0 + margin)


def boxes_overlap(a: OrientedBox, b: OrientedBox, margin: float = 0.0) -> bool:
    """Separating-axis test for two footprints. margin > 0 inflates both."""
    ca = a.corners()
    cb = b.corners()
    for ref in (a, b):
        c, s = math.cos(ref.yaw), math.sin(ref.yaw)
        for axis in ((c, s), (-s, c)):
            pa = ca @ np.asarray(axis)
            pb = cb @ np.asarray(axis)
            if pa.max() + margin < pb.min() or pb.max() + margin < pa.min():
                return False
    return True


@dataclass(frozen=True)
class VehicleBox:
    """A footprint plus its height above ground. Height capped at 4 m."""

    box: OrientedBox
    height: float

    def __post_init__(self):
        if not (0.0 < self.height <= 4.0):
            raise ValueError(f"height must be in (0, 4], got {self.height}")


@dataclass
class Scene:
    """One synthetic frame: two sensing vehicles plus boxed world content.

    The sensing vehicles are poses only and have no footprint, so they never
    occlude anything. occluded_target indexes the target whose centroid is
    hidden from the ego sensor by an obstacle, or None when the scene was
    generated without obstacles.
    """

    ego_pose: Pose
    coop_pose: Pose
    targets: list[VehicleBox] = field(default_factory=list)
    obstacles: list[VehicleBox] = field(default_factory=list)
    extent: float = 20.0
    seed: int = 0
    occluded_target: int | None = None

    def all_boxes(self) -> list[VehicleBox]:
        return list(self.targets) + list(self.obstacles)


@dataclass(frozen=True)
class LidarSpec:
    """Planar sweep parameters for the synthetic LIDAR."""

    range_m: float
    azimuth_step: float = 0.025
    elevation_samples: tuple[float, ...] = (0.4, 0.9, 1.4, 2.2, 3.0)
    noise_sigma: float = 0.02

    def __post_init__(self):
        if self.range_m <= 0:
            raise ValueError(f"range_m must be positive, got {self.range_m}")
        if not (0 < self.azimuth_step < math.pi / 4):
            raise ValueError(f"azimuth_step out of range: {self.azimuth_step}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.elevation_samples:
            raise ValueError("need at least one elevation sample")
        for z in self.elevation_samples:
            if not (0.0 <= z < 4.0):
                raise ValueError(f"elevation sample out of [0, 4): {z}")
