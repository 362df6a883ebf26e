"""Frame alignment and birds-eye-view projection.

Conventions used throughout the package:

* World axes are right-handed, z up, yaw counterclockwise about +z.
* Point clouds are row vectors, so rotation is applied by right-multiplying
  the (N, 3) array: rotated = points @ R(roll) @ R(pitch) @ R(yaw).
* A sensor-local cloud keeps the sensor at the origin. Rotation alignment
  removes the attitude but deliberately not the position; position is
  reconciled later at feature-map level by an integer cell shift.
* BEV arrays are indexed [x_pixel, y_pixel, channel]. Pixel 0 sits at
  world coordinate -extent relative to the sensor.
* The global pixel frame used for the cell shift is anchored at the world
  origin: pixel(p) = floor(p * resolution).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .types import Pose


def rot_x(angle: float) -> np.ndarray:
    """Roll matrix for row-vector post-multiplication."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1, 0, 0], [0, c, s], [0, -s, c]], dtype=np.float64)


def rot_y(angle: float) -> np.ndarray:
    """Pitch matrix for row-vector post-multiplication."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0, -s], [0, 1, 0], [s, 0, c]], dtype=np.float64)


def rot_z(angle: float) -> np.ndarray:
    """Yaw matrix for row-vector post-multiplication."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, s, 0], [-s, c, 0], [0, 0, 1]], dtype=np.float64)


def attitude_matrix(pose: Pose) -> np.ndarray:
    """Combined sensor-to-world rotation, roll then pitch then yaw."""
    return rot_x(pose.roll) @ rot_y(pose.pitch) @ rot_z(pose.yaw)


def rotate_to_global(cloud: np.ndarray, pose: Pose) -> np.ndarray:
    """Rotate a sensor-local cloud into world axes. No translation.

    :param cloud: (N, 3) array, any float dtype, all values finite.
    :param pose: sensor pose supplying roll/pitch/yaw.
    :returns: (N, 3) float64 array, sensor still at the origin.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"cloud must be (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("cloud contains non-finite values")
    return pts @ attitude_matrix(pose)


@dataclass(frozen=True)
class BevGrid:
    """Square projection grid centred on the sensor.

    size is the pixel count per side; resolution = size / (2 * extent_m)
    pixels per metre. Height bins are half-open: below bin_edges[0],
    between consecutive edges, and at-or-above the last edge. With the
    default edges (2, 4) that is (-inf, 2), [2, 4), [4, inf).
    """

    extent_m: float
    size: int = 128
    bin_edges: tuple[float, ...] = (2.0, 4.0)
    n_max: int = 32

    def __post_init__(self):
        if self.extent_m <= 0:
            raise ValueError(f"extent_m must be positive, got {self.extent_m}")
        if self.size <= 0:
            raise ValueError(f"size must be positive, got {self.size}")
        if self.n_max <= 0:
            raise ValueError(f"n_max must be positive, got {self.n_max}")
        if list(self.bin_edges) != sorted(self.bin_edges):
            raise ValueError(f"bin_edges must be ascending, got {self.bin_edges}")

    @property
    def resolution(self) -> float:
        """Pixels per metre."""
        return self.size / (2.0 * self.extent_m)

    @property
    def num_bins(self) -> int:
        return len(self.bin_edges) + 1


@dataclass
class BevImage:
    """Density image over a BevGrid, values in [0, 1], float32."""

    data: np.ndarray
    grid: BevGrid

    def __post_init__(self):
        expect = (self.grid.size, self.grid.size, self.grid.num_bins)
        if self.data.shape != expect:
            raise ValueError(f"BEV data shape {self.data.shape}, expected {expect}")


def bev_counts(cloud: np.ndarray, grid: BevGrid) -> np.ndarray:
    """Raw per-pixel per-height-bin point counts, shape (size, size, bins).

    Points with pixel index outside [0, size) on either axis are dropped;
    every in-extent point lands in exactly one (pixel, bin) cell, so the
    array sums to the number of in-extent points.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((grid.size, grid.size, grid.num_bins), dtype=np.int64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"cloud must be (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("cloud contains non-finite values")
    res = grid.resolution
    px = np.floor((pts[:, 0] + grid.extent_m) * res).astype(np.int64)
    py = np.floor((pts[:, 1] + grid.extent_m) * res).astype(np.int64)
    keep = (px >= 0) & (px < grid.size) & (py >= 0) & (py < grid.size)
    zbin = np.searchsorted(np.asarray(grid.bin_edges), pts[:, 2], side="right")
    counts = np.zeros((grid.size, grid.size, grid.num_bins), dtype=np.int64)
    np.add.at(counts, (px[keep], py[keep], zbin[keep]), 1)
    return counts


def project_bev(cloud: np.ndarray, grid: BevGrid) -> BevImage:
    """Project a rotation-aligned cloud to a normalized density image.

    Counts are divided by grid.n_max and clipped to [0, 1].
    """
    counts = bev_counts(cloud, grid)
    data = np.clip(counts.astype(np.float32) / np.float32(grid.n_max), 0.0, 1.0)
    return BevImage(data=data, grid=grid)


@dataclass
class FeatureMap:
    """Extractor output tied to the sensor pose it was computed from.

    values is (C_t, H_f, W_f) float32; s is the BEV-pixels-per-cell
    downsampling factor of the extractor. no_overlap marks a translated
    map whose entire content fell outside the grid.
    """

    values: np.ndarray
    s: int
    origin_pose: Pose
    grid: BevGrid
    no_overlap: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"feature values must be (C, H, W), got {self.values.shape}")
        if self.s < 1:
            raise ValueError(f"s must be >= 1, got {self.s}")
        if self.grid.size % self.s != 0:
            raise ValueError(f"grid size {self.grid.size} not divisible by s={self.s}")
        if self.values.shape[1] != self.grid.size // self.s or self.values.shape[2] != self.grid.size // self.s:
            raise ValueError(
                f"feature grid {self.values.shape[1:]} inconsistent with "
                f"size {self.grid.size} / s {self.s}"
            )

    @property
    def c_t(self) -> int:
        return self.values.shape[0]

    @property
    def h_f(self) -> int:
        return self.values.shape[1]

    @property
    def w_f(self) -> int:
        return self.values.shape[2]


def pose_pixel(pose: Pose, grid: BevGrid) -> tuple[int, int]:
    """Pixel of a pose in the global pixel frame anchored at the world origin."""
    res = grid.resolution
    return (int(math.floor(pose.x * res)), int(math.floor(pose.y * res)))


def feature_shift(
    ego_pose: Pose, coop_pose: Pose, grid: BevGrid, s: int
) -> tuple[int, int]:
    """Integer feature-cell shift aligning a sender map onto the ego grid.

    Both poses are reduced to global pixels, then to feature cells by
    floor division by s; the shift is the ego cell minus the sender cell
    per axis. Moving the sender by exactly k*s pixels changes the shift
    by exactly k.
    """
    if s < 1:
        raise ValueError(f"s must be >= 1, got {s}")
    ex, ey = pose_pixel(ego_pose, grid)
    cx, cy = pose_pixel(coop_pose, grid)
    return (ex // s - cx // s, ey // s - cy // s)


def translate_featuremap(fmap: FeatureMap, ego_pose: Pose, coop_pose: Pose) -> FeatureMap:
    """Shift a received feature map onto the ego vehicle's feature grid.

    aligned[x, y] = received[x + dx, y + dy] with (dx, dy) from
    feature_shift; cells whose source falls outside the received map are
    zero. A shift that vacates the whole grid yields an all-zero map with
    no_overlap set rather than an error.
    """
    dx, dy = feature_shift(ego_pose, coop_pose, fmap.grid, fmap.s)
    c, h, w = fmap.values.shape
    out = np.zeros_like(fmap.values)
    x0, x1 = max(0, -dx), min(h, h - dx)
    y0, y1 = max(0, -dy), min(w, w - dy)
    empty = x1 <= x0 or y1 <= y0
    if not empty:
        out[:, x0:x1, y0:y1] = fmap.values[:, x0 + dx : x1 + dx, y0 + dy : y1 + dy]
    return FeatureMap(
        values=out,
        s=fmap.s,
        origin_pose=ego_pose,
        grid=fmap.grid,
        no_overlap=bool(empty),
    )
