"""Feature-map wire codec and lossy channel model.

Message layout, all little-endian:

    offset  field
    0       magic b"FSMG"
    4       version        u16
    6       frame id       u64
    14      sender id      u32
    18      sender pose    3 x f64 (x, y, yaw)
    42      H_f, W_f, C_t  3 x u16
    48      s              u8
    49      dtype tag      u8   (0 = f32, 1 = f16, 2 = q8)
    50      quant min, max 2 x f32 (zero unless dtype is q8)
    58      header CRC32   u32  (over bytes 0..57)
    62      payload        H_f * W_f * C_t * bytes(dtype), channel-major
    62+n    payload CRC32  u32

q8 payloads are per-message affine: byte q decodes to
min + q * (max - min) / 255, so the worst-case absolute error is
(max - min) / 510. The payload length is exactly what payload_size()
reports; the quantizer parameters ride in the header.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .geometry import FeatureMap
from .types import Pose

MAGIC = b"FSMG"
VERSION = 1

_HEADER_FMT = "<4sHQI3dHHHBBff"
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)  # 58
_CRC_FMT = "<I"
# header + header CRC + payload CRC, i.e. message bytes beyond the payload
WIRE_OVERHEAD = _HEADER_SIZE + 8

DTYPE_TAGS = {"f32": 0, "f16": 1, "q8": 2}
DTYPE_NAMES = {v: k for k, v in DTYPE_TAGS.items()}
DTYPE_BYTES = {"f32": 4, "f16": 2, "q8": 1}


class MessageDecodeError(ValueError):
    """Base class for all decode failures."""


class TruncatedError(MessageDecodeError):
    pass


class ChecksumError(MessageDecodeError):
    pass


class VersionError(MessageDecodeError):
    pass


class FormatError(MessageDecodeError):
    pass


class BandwidthError(ValueError):
    """Encoding refused: the feature map is not smaller than its BEV input."""


def payload_size(h_f: int, w_f: int, c_t: int, dtype: str = "f32") -> int:
    """Payload bytes for one message: H_f * W_f * C_t * bytes(dtype)."""
    if dtype not in DTYPE_BYTES:
        raise ValueError(f"unknown dtype {dtype!r}")
    if h_f < 1 or w_f < 1 or c_t < 1:
        raise ValueError(f"dimensions must be positive, got {(h_f, w_f, c_t)}")
    return h_f * w_f * c_t * DTYPE_BYTES[dtype]


@dataclass(frozen=True, eq=False)
class FeatureMessage:
    """Decoded message. values is (C_t, H_f, W_f) float32, already
    dequantized. Immutable; decode never hands out views into the wire
    buffer."""

    frame_id: int
    sender_id: int
    pose: Pose
    s: int
    dtype: str
    values: np.ndarray

    @property
    def c_t(self) -> int:
        return self.values.shape[0]

    @property
    def h_f(self) -> int:
        return self.values.shape[1]

    @property
    def w_f(self) -> int:
        return self.values.shape[2]


def encode(fmap: FeatureMap, frame_id: int, sender_id: int, dtype: str = "f32") -> bytes:
    """Serialize a feature map. Refuses any configuration whose payload
    element count is not strictly below the BEV input's element count."""
    if dtype not in DTYPE_TAGS:
        raise ValueError(f"unknown dtype {dtype!r}")
    c_t, h_f, w_f = fmap.values.shape
    bev_elems = fmap.grid.size * fmap.grid.size * fmap.grid.num_bins
    if h_f * w_f * c_t >= bev_elems:
        raise BandwidthError(
            f"feature map {h_f}x{w_f}x{c_t} = {h_f * w_f * c_t} elements is not "
            f"smaller than the {fmap.grid.size}x{fmap.grid.size}x{fmap.grid.num_bins} "
            f"BEV input ({bev_elems} elements)"
        )
    vals = np.ascontiguousarray(fmap.values, dtype=np.float32)
    qmin = qmax = 0.0
    if dtype == "f32":
        payload = vals.astype("<f4").tobytes()
    elif dtype == "f16":
        payload = vals.astype("<f2").tobytes()
    else:
        qmin = float(vals.min())
        qmax = float(vals.max())
        if qmax > qmin:
            q = np.rint((vals - qmin) * (255.0 / (qmax - qmin)))
        else:
            q = np.zeros_like(vals)
        payload = q.astype(np.uint8).tobytes()
    pose = fmap.origin_pose
    header = struct.pack(
        _HEADER_FMT,
        MAGIC,
        VERSION,
        frame_id,
        sender_id,
        pose.x,
        pose.y,
        pose.yaw,
        h_f,
        w_f,
        c_t,
        fmap.s,
        DTYPE_TAGS[dtype],
        qmin,
        qmax,
    )
    return (
        header
        + struct.pack(_CRC_FMT, zlib.crc32(header))
        + payload
        + struct.pack(_CRC_FMT, zlib.crc32(payload))
    )


def decode(data: bytes) -> FeatureMessage:
    """Parse and verify a message. Raises TruncatedError, FormatError,
    VersionError, or ChecksumError; never returns a partially valid
    message."""
    if len(data) < _HEADER_SIZE + 4:
        raise TruncatedError(
            f"message is {len(data)} bytes, header needs {_HEADER_SIZE + 4}"
        )
    header = data[:_HEADER_SIZE]
    (stored_hcrc,) = struct.unpack_from(_CRC_FMT, data, _HEADER_SIZE)
    if zlib.crc32(header) != stored_hcrc:
        raise ChecksumError("header checksum mismatch")
    (
        magic,
        version,
        frame_id,
        sender_id,
        px,
        py,
        pyaw,
        h_f,
        w_f,
        c_t,
        s,
        dtag,
        qmin,
        qmax,
    ) = struct.unpack(_HEADER_FMT, header)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"message version {version}, expected {VERSION}")
    if dtag not in DTYPE_NAMES:
        raise FormatError(f"unknown dtype tag {dtag}")
    dtype = DTYPE_NAMES[dtag]
    if h_f < 1 or w_f < 1 or c_t < 1 or s < 1:
        raise FormatError(f"bad dimensions H_f={h_f} W_f={w_f} C_t={c_t} s={s}")
    nbytes = payload_size(h_f, w_f, c_t, dtype)
    expect = _HEADER_SIZE + 4 + nbytes + 4
    if len(data) < expect:
        raise TruncatedError(f"message is {len(data)} bytes, expected {expect}")
    if len(data) > expect:
        raise FormatError(f"{len(data) - expect} trailing bytes after payload checksum")
    payload = data[_HEADER_SIZE + 4 : _HEADER_SIZE + 4 + nbytes]
    (stored_pcrc,) = struct.unpack_from(_CRC_FMT, data, expect - 4)
    if zlib.crc32(payload) != stored_pcrc:
        raise ChecksumError("payload checksum mismatch")
    shape = (c_t, h_f, w_f)
    if dtype == "f32":
        values = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    elif dtype == "f16":
        values = np.frombuffer(payload, dtype="<f2").reshape(shape).astype(np.float32)
    else:
        q = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
        values = (qmin + q.astype(np.float32) * ((qmax - qmin) / 255.0)).astype(np.float32)
    return FeatureMessage(
        frame_id=frame_id,
        sender_id=sender_id,
        pose=Pose(x=px, y=py, yaw=pyaw),
        s=s,
        dtype=dtype,
        values=values,
    )


@dataclass(frozen=True)
class ChannelModel:
    """Bernoulli drop plus fixed latency with uniform jitter."""

    drop_probability: float = 0.0
    latency_ms: float = 5.0
    jitter_ms: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.drop_probability <= 1.0):
            raise ValueError(f"drop_probability outside [0, 1]: {self.drop_probability}")
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError("latency and jitter must be >= 0")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass(frozen=True)
class Delivered:
    data: bytes
    latency_ms: float


@dataclass(frozen=True)
class Dropped:
    pass


def simulate_channel(
    data: bytes, model: ChannelModel, rng: np.random.Generator | None = None
) -> Delivered | Dropped:
    """One send attempt. The caller owns the generator for a link; passing
    none uses a fresh generator from the model seed."""
    if rng is None:
        rng = model.rng()
    if rng.uniform() < model.drop_probability:
        return Dropped()
    return Delivered(data=data, latency_ms=model.latency_ms + rng.uniform(0.0, model.jitter_ms))
