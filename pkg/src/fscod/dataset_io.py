"""Binary dataset file for scenes plus their two point clouds.

Layout, little-endian:

    magic b"FSCD", version u16, record count u32
    per record:
        ego pose    6 x f64  (x y z roll pitch yaw)
        coop pose   6 x f64
        extent      f64
        seed        u64
        occluded    i32      (-1 when no flagged target)
        target count    u32, then per target   6 x f64 (cx cy w l yaw height)
        obstacle count  u32, then per obstacle 6 x f64
        ego point count  u32, then 3 x f32 per point
        coop point count u32, then 3 x f32 per point

Clouds are stored as float32, which is also their in-memory dtype, so a
write/read round trip reproduces every record bit for bit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .types import OrientedBox, Pose, Scene, VehicleBox

MAGIC = b"FSCD"
VERSION = 1

_MAX_COUNT = 50_000_000  # sanity bound against corrupt length fields


class DatasetFormatError(ValueError):
    """Malformed dataset file; carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class SceneRecord:
    scene: Scene
    ego_cloud: np.ndarray
    coop_cloud: np.ndarray


def _pose_bytes(p: Pose) -> bytes:
    return struct.pack("<6d", p.x, p.y, p.z, p.roll, p.pitch, p.yaw)


def _boxes_bytes(items: list[VehicleBox]) -> bytes:
    parts = [struct.pack("<I", len(items))]
    for vb in items:
        b = vb.box
        parts.append(struct.pack("<6d", b.cx, b.cy, b.w, b.l, b.yaw, vb.height))
    return b"".join(parts)


def _cloud_bytes(cloud: np.ndarray) -> bytes:
    pts = np.ascontiguousarray(cloud, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"cloud must be (N, 3), got {pts.shape}")
    return struct.pack("<I", pts.shape[0]) + pts.tobytes()


def write_dataset(records: list[SceneRecord], path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(records)))
        for rec in records:
            sc = rec.scene
            occ = -1 if sc.occluded_target is None else sc.occluded_target
            fh.write(_pose_bytes(sc.ego_pose))
            fh.write(_pose_bytes(sc.coop_pose))
            fh.write(struct.pack("<dQi", sc.extent, sc.seed, occ))
            fh.write(_boxes_bytes(sc.targets))
            fh.write(_boxes_bytes(sc.obstacles))
            fh.write(_cloud_bytes(rec.ego_cloud))
            fh.write(_cloud_bytes(rec.coop_cloud))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.data):
            raise DatasetFormatError(f"truncated while reading {what}", self.off)
        out = self.data[self.off : self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def count(self, what: str) -> int:
        (n,) = self.unpack("<I", what)
        if n > _MAX_COUNT:
            raise DatasetFormatError(f"implausible {what}: {n}", self.off - 4)
        return n


def _read_pose(r: _Reader, what: str) -> Pose:
    x, y, z, roll, pitch, yaw = r.unpack("<6d", what)
    return Pose(x, y, z, roll, pitch, yaw)


def _read_boxes(r: _Reader, what: str) -> list[VehicleBox]:
    n = r.count(f"{what} count")
    out = []
    for i in range(n):
        cx, cy, w, l, yaw, height = r.unpack("<6d", f"{what} {i}")
        out.append(VehicleBox(OrientedBox(cx, cy, w, l, yaw), height=height))
    return out


def _read_cloud(r: _Reader, what: str) -> np.ndarray:
    n = r.count(f"{what} point count")
    raw = r.take(12 * n, f"{what} points")
    return np.frombuffer(raw, dtype="<f4").reshape(n, 3).copy()


def read_dataset(path) -> list[SceneRecord]:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise DatasetFormatError(f"version {version}, expected {VERSION}", 4)
    n_records = r.count("record count")
    records = []
    for i in range(n_records):
        ego = _read_pose(r, f"record {i} ego pose")
        coop = _read_pose(r, f"record {i} coop pose")
        extent, seed, occ = r.unpack("<dQi", f"record {i} header")
        targets = _read_boxes(r, f"record {i} target")
        obstacles = _read_boxes(r, f"record {i} obstacle")
        ego_cloud = _read_cloud(r, f"record {i} ego")
        coop_cloud = _read_cloud(r, f"record {i} coop")
        scene = Scene(
            ego_pose=ego,
            coop_pose=coop,
            targets=targets,
            obstacles=obstacles,
            extent=extent,
            seed=seed,
            occluded_target=None if occ < 0 else occ,
        )
        records.append(SceneRecord(scene=scene, ego_cloud=ego_cloud, coop_cloud=coop_cloud))
    if r.off != len(data):
        raise DatasetFormatError(f"{len(data) - r.off} trailing bytes", r.off)
    return records


def record_size(rec: SceneRecord) -> int:
    """Exact on-disk size of one record, for accounting checks."""
    n_boxes = len(rec.scene.targets) + len(rec.scene.obstacles)
    return (
        2 * 48  # poses
        + 8 + 8 + 4  # extent, seed, occluded index
        + 2 * 4 + n_boxes * 48  # box counts and boxes
        + 2 * 4  # point counts
        + 12 * (len(rec.ego_cloud) + len(rec.coop_cloud))
    )


def file_size(records: list[SceneRecord]) -> int:
    return 4 + 2 + 4 + sum(record_size(r) for r in records)
