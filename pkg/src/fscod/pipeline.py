"""Two-view detection pipeline with a shared-weight feature extractor.

One extractor network serves both vehicles: the ego BEV and the received
view are pushed through the same parameter vector, the received feature
map is shifted onto the ego grid by an integer cell offset, and the two
maps are summed element-wise before the detection head runs. Because the
sum is linear, the extractor gradient for a training step is exactly the
sum of the two per-view gradients, which is how train_step computes it.

With no received map the pipeline reduces to extract-then-detect; that
path is also the baseline architecture, a plain cascade of the same two
networks trained without fusion.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .evaluate import DetectionGrid, iou, sigmoid
from .geometry import BevGrid, BevImage, FeatureMap, translate_featuremap
from .nn import SGD, Adam, Network
from .transport import FeatureMessage
from .types import OrientedBox, Pose

log = logging.getLogger("fscod")

DEFAULT_ANCHORS = ((2.0, 4.6), (4.6, 2.0))  # (w, l) metres

# Initial objectness-logit bias, sigmoid(-2) ~ 0.12. See FsCodModel.__init__.
CONF_BIAS_PRIOR = -2.0

# Unscaled conv widths; pools sit after blocks 0, 1, 4 and (s=16 only) 7.
EXTRACTOR_WIDTHS = (24, 48, 64, 32, 64, 128, 64, 128, 128)
DETECTOR_WIDTHS = (128, 256, 512, 1024, 2048, 1024, 2048, 1024)
DETECTOR_KERNELS = (1, 3, 1, 1, 3, 1, 1, 3)


@dataclass(frozen=True)
class PipelineConfig:
    grid: BevGrid
    s: int = 8
    c_t: int = 8
    channel_scale: int = 8
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    conf_threshold: float = 0.4
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        if self.s not in (8, 16):
            raise ValueError(f"s must be 8 or 16, got {self.s}")
        if self.grid.size % self.s != 0:
            raise ValueError(f"grid size {self.grid.size} not divisible by s={self.s}")
        if self.c_t < 1:
            raise ValueError(f"c_t must be >= 1, got {self.c_t}")
        if self.channel_scale < 1:
            raise ValueError(f"channel_scale must be >= 1, got {self.channel_scale}")
        if not self.anchors:
            raise ValueError("need at least one anchor")

    @property
    def cells(self) -> int:
        return self.grid.size // self.s

    @property
    def cell_m(self) -> float:
        return self.s / self.grid.resolution

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)


def extractor_spec(cfg: PipelineConfig) -> list[tuple]:
    """Feature extractor layers; the final 1x1 conv emitting C_t channels
    is bare (no norm, no activation) so its raw outputs are what gets
    shared and summed."""
    w = [max(1, v // cfg.channel_scale) for v in EXTRACTOR_WIDTHS]
    spec: list[tuple] = []

    def block(out):
        spec.extend([("conv", 3, out), ("norm",), ("lrelu",)])

    block(w[0])
    spec.append(("pool",))
    block(w[1])
    spec.append(("pool",))
    block(w[2])
    block(w[3])
    block(w[4])
    spec.append(("pool",))
    block(w[5])
    block(w[6])
    block(w[7])
    if cfg.s == 16:
        spec.append(("pool",))
    block(w[8])
    spec.append(("conv", 1, cfg.c_t))
    return spec


def detector_spec(cfg: PipelineConfig) -> list[tuple]:
    """Detection head layers; the final 1x1 conv emits A*7 raw channels."""
    spec: list[tuple] = []
    for k, width in zip(DETECTOR_KERNELS, DETECTOR_WIDTHS):
        spec.extend([("conv", k, max(1, width // cfg.channel_scale)), ("norm",), ("lrelu",)])
    spec.append(("conv", 1, cfg.num_anchors * 7))
    return spec


class FsCodModel:
    """One extractor plus one detection head. The same instance serves
    baseline inference (extract, detect) and cooperative inference
    (extract, align, sum, detect)."""

    def __init__(self, cfg: PipelineConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.extractor = Network(
            cfg.grid.num_bins, extractor_spec(cfg), seed=seed, dtype=dtype
        )
        self.detector = Network(cfg.c_t, detector_spec(cfg), seed=seed + 1, dtype=dtype)
        if self.extractor.downsample_factor != cfg.s:
            raise ValueError(
                f"extractor downsamples by {self.extractor.downsample_factor}, config says {cfg.s}"
            )
        if self.detector.downsample_factor != 1:
            raise ValueError("detection head must preserve resolution")
        # Start objectness near the background rate instead of 0.5. Almost
        # every anchor cell is empty, so a neutral start makes early epochs
        # fight the no-object term instead of learning discrimination.
        head = self.detector.layers[-1]
        for a in range(cfg.num_anchors):
            head.b[a * 7 + 6] = CONF_BIAS_PRIOR

    @property
    def param_count(self) -> int:
        return self.extractor.param_count + self.detector.param_count

    def extract(self, bev: BevImage, pose: Pose, train: bool = False) -> FeatureMap:
        """Run the shared extractor on one view."""
        x = np.ascontiguousarray(bev.data.transpose(2, 0, 1))[None]
        out = self.extractor.forward(x, train=train)
        return FeatureMap(values=out[0], s=self.cfg.s, origin_pose=pose, grid=bev.grid)

    def extract_pair(self, bev_a: BevImage, bev_b: BevImage) -> np.ndarray:
        """Batched two-view extractor forward (training path); returns the
        raw (2, C_t, H_f, W_f) activations with caches armed."""
        x = np.stack([bev_a.data.transpose(2, 0, 1), bev_b.data.transpose(2, 0, 1)])
        return self.extractor.forward(np.ascontiguousarray(x), train=True)

    def detect(self, fmap: FeatureMap, train: bool = False) -> DetectionGrid:
        raw = self.detector.forward(fmap.values[None], train=train)
        a = self.cfg.num_anchors
        return DetectionGrid(
            values=raw[0].reshape(a, 7, fmap.h_f, fmap.w_f),
            anchors=self.cfg.anchors,
            grid=self.cfg.grid,
            s=self.cfg.s,
        )

    def run_baseline(self, bev: BevImage, pose: Pose) -> DetectionGrid:
        """Single-view path: extract, then detect."""
        return self.detect(self.extract(bev, pose))

    def run_coop(
        self, bev: BevImage, pose: Pose, message: FeatureMessage | None
    ) -> DetectionGrid:
        """Cooperative path. A missing or incompatible message degrades to
        the single-view path on this vehicle's own observation."""
        if message is None:
            return self.run_baseline(bev, pose)
        cells = self.cfg.cells
        if (
            message.s != self.cfg.s
            or message.c_t != self.cfg.c_t
            or message.h_f != cells
            or message.w_f != cells
        ):
            log.warning(
                "rejecting feature message with grid meta %sx%sx%s s=%s "
                "(expected %sx%sx%s s=%s); falling back to single view",
                message.h_f, message.w_f, message.c_t, message.s,
                cells, cells, self.cfg.c_t, self.cfg.s,
            )
            return self.run_baseline(bev, pose)
        own = self.extract(bev, pose)
        received = FeatureMap(
            values=message.values, s=self.cfg.s, origin_pose=message.pose, grid=self.cfg.grid
        )
        aligned = translate_featuremap(received, pose, message.pose)
        return self.detect(fuse(own, aligned))


def fuse(a: FeatureMap, b: FeatureMap) -> FeatureMap:
    """Element-wise sum of two feature maps on the same grid. Symmetric:
    fuse(a, b) and fuse(b, a) are bit-identical."""
    if a.values.shape != b.values.shape:
        raise ValueError(f"feature shapes differ: {a.values.shape} vs {b.values.shape}")
    if a.s != b.s or a.grid != b.grid:
        raise ValueError("feature maps live on different grids")
    return FeatureMap(values=a.values + b.values, s=a.s, origin_pose=a.origin_pose, grid=a.grid)


@dataclass
class TrainingSample:
    """One frame prepared for training: both views projected, ground truth
    expressed in the ego frame (world axes, ego position at the origin)."""

    bev_ego: BevImage
    bev_coop: BevImage
    ego_pose: Pose
    coop_pose: Pose
    targets: list[OrientedBox]
    frame_id: int = 0


# Training augmentation: the eight symmetries of the grid. A reflected or
# quarter-turned world is another valid world, and on an aligned BEV the
# whole transform is a pixel permutation, so samples can be remapped
# exactly without touching the point clouds.

DIHEDRAL_COUNT = 8


def _quarter_turn(arr: np.ndarray) -> np.ndarray:
    # (x, y, ...) indexed pixels under a CCW world rotation
    return np.flip(np.swapaxes(arr, 0, 1), 0)


def _dihedral_xy(x: float, y: float, k: int) -> tuple[float, float]:
    if k >= 4:
        x = -x
    for _ in range(k % 4):
        x, y = -y, x
    return x, y


def _dihedral_yaw(yaw: float, k: int) -> float:
    if k >= 4:
        yaw = math.pi - yaw
    return yaw + (k % 4) * (math.pi / 2.0)


def dihedral_box(b: OrientedBox, k: int) -> OrientedBox:
    cx, cy = _dihedral_xy(b.cx, b.cy, k)
    return OrientedBox(cx, cy, b.w, b.l, _dihedral_yaw(b.yaw, k))


def dihedral_sample(sample: TrainingSample, k: int) -> TrainingSample:
    """Remap a training sample by symmetry k (0..7): k % 4 CCW quarter
    turns, optionally after a reflection of the x axis (k >= 4). k = 0
    returns the sample unchanged."""
    if not 0 <= k < DIHEDRAL_COUNT:
        raise ValueError(f"dihedral index must be in [0, 8), got {k}")
    if k == 0:
        return sample

    def remap(bev: BevImage) -> BevImage:
        data = bev.data
        if k >= 4:
            data = np.flip(data, 0)
        for _ in range(k % 4):
            data = _quarter_turn(data)
        return BevImage(np.ascontiguousarray(data), bev.grid)

    def pose(p: Pose) -> Pose:
        x, y = _dihedral_xy(p.x, p.y, k)
        return Pose(x, y, yaw=_dihedral_yaw(p.yaw, k))

    targets = [dihedral_box(b, k) for b in sample.targets]
    return TrainingSample(
        bev_ego=remap(sample.bev_ego),
        bev_coop=remap(sample.bev_coop),
        ego_pose=pose(sample.ego_pose),
        coop_pose=pose(sample.coop_pose),
        targets=targets,
        frame_id=sample.frame_id,
    )


@dataclass
class LossTargets:
    """Per-sample responsibility assignment, precomputed once."""

    anchor: np.ndarray  # (K,) int
    ix: np.ndarray  # (K,) int
    iy: np.ndarray  # (K,) int
    frac_x: np.ndarray  # (K,) target cell fraction
    frac_y: np.ndarray
    sqrt_w: np.ndarray
    sqrt_l: np.ndarray
    sin: np.ndarray
    cos: np.ndarray


def _anchor_for(box: OrientedBox, anchors) -> int:
    centred = OrientedBox(0.0, 0.0, box.w, box.l, box.yaw)
    best, best_iou = 0, -1.0
    for i, (aw, al) in enumerate(anchors):
        v = iou(centred, OrientedBox(0.0, 0.0, aw, al, 0.0))
        if v > best_iou:
            best, best_iou = i, v
    return best


def build_loss_targets(targets: list[OrientedBox], cfg: PipelineConfig) -> LossTargets:
    """Assign each in-grid box to the cell containing its centre and the
    anchor of highest co-centred footprint IoU. A cell/anchor slot holds
    at most one box; later boxes contending for a taken slot are dropped.
    Heading targets are reduced mod pi: the simulated footprints are
    symmetric, so the heading sign is unobservable."""
    cell = cfg.cell_m
    cells = cfg.cells
    taken: set[tuple[int, int, int]] = set()
    rows = []
    for box in targets:
        fx = (box.cx + cfg.grid.extent_m) / cell
        fy = (box.cy + cfg.grid.extent_m) / cell
        ix, iy = int(math.floor(fx)), int(math.floor(fy))
        if not (0 <= ix < cells and 0 <= iy < cells):
            continue
        a = _anchor_for(box, cfg.anchors)
        key = (a, ix, iy)
        if key in taken:
            continue
        taken.add(key)
        yaw = math.remainder(box.yaw, math.pi)
        rows.append(
            (a, ix, iy, fx - ix, fy - iy,
             math.sqrt(box.w), math.sqrt(box.l), math.sin(yaw), math.cos(yaw))
        )
    arr = np.array(rows, dtype=np.float64).reshape(-1, 9)
    return LossTargets(
        anchor=arr[:, 0].astype(np.int64),
        ix=arr[:, 1].astype(np.int64),
        iy=arr[:, 2].astype(np.int64),
        frac_x=arr[:, 3],
        frac_y=arr[:, 4],
        sqrt_w=arr[:, 5],
        sqrt_l=arr[:, 6],
        sin=arr[:, 7],
        cos=arr[:, 8],
    )


def detection_loss(
    raw: np.ndarray, lt: LossTargets, cfg: PipelineConfig
) -> tuple[float, np.ndarray]:
    """Squared-error detection loss and its gradient w.r.t. the raw grid.

    loss = lambda_coord * sum over responsible slots of the SSE on
    (cell-fraction x, cell-fraction y, sqrt side lengths, sin, cos)
    + sum over responsible slots of (conf - 1)^2
    + lambda_noobj * sum over all other slots of conf^2,
    with conf the sigmoid of the raw confidence channel and sides decoded
    as anchor * exp(t). Everything accumulates in float64.
    """
    a_n, ch, hf, wf = raw.shape
    if ch != 7 or a_n != cfg.num_anchors:
        raise ValueError(f"raw grid shape {raw.shape} does not match config")
    v = raw.astype(np.float64)
    grad = np.zeros_like(v)

    conf = sigmoid(v[:, 6])
    dconf = conf * (1.0 - conf)
    noobj = np.ones((a_n, hf, wf), dtype=bool)
    k = lt.anchor.size
    if k:
        noobj[lt.anchor, lt.ix, lt.iy] = False
    loss = cfg.lambda_noobj * float((conf[noobj] ** 2).sum())
    grad[:, 6][noobj] = cfg.lambda_noobj * 2.0 * conf[noobj] * dconf[noobj]

    if k:
        sel = (lt.anchor, lt.ix, lt.iy)
        anchors = np.asarray(cfg.anchors, dtype=np.float64)
        lc = cfg.lambda_coord

        px = sigmoid(v[:, 0][sel])
        py = sigmoid(v[:, 1][sel])
        ex = px - lt.frac_x
        ey = py - lt.frac_y
        grad[:, 0][sel] = lc * 2.0 * ex * px * (1.0 - px)
        grad[:, 1][sel] = lc * 2.0 * ey * py * (1.0 - py)

        # sqrt(anchor * exp(t)) = sqrt(anchor) * exp(t / 2); t is clamped
        # to the same +/-10 the decoder uses so a wild logit cannot
        # overflow, and the gradient keeps its sign to pull it back
        sw = np.sqrt(anchors[lt.anchor, 0]) * np.exp(np.clip(v[:, 2][sel], -10.0, 10.0) / 2.0)
        sl = np.sqrt(anchors[lt.anchor, 1]) * np.exp(np.clip(v[:, 3][sel], -10.0, 10.0) / 2.0)
        ew = sw - lt.sqrt_w
        el = sl - lt.sqrt_l
        grad[:, 2][sel] = lc * ew * sw
        grad[:, 3][sel] = lc * el * sl

        es = v[:, 4][sel] - lt.sin
        ec = v[:, 5][sel] - lt.cos
        grad[:, 4][sel] = lc * 2.0 * es
        grad[:, 5][sel] = lc * 2.0 * ec

        cr = conf[sel]
        grad[:, 6][sel] = 2.0 * (cr - 1.0) * dconf[sel]

        loss += lc * float(
            (ex**2 + ey**2 + ew**2 + el**2 + es**2 + ec**2).sum()
        ) + float(((cr - 1.0) ** 2).sum())

    if not np.isfinite(loss):
        raise FloatingPointError("non-finite detection loss")
    return loss, grad.astype(raw.dtype)


class Trainer:
    """Per-frame training of one model, cooperative or single-view.

    The cooperative step extracts both views through the one shared
    extractor as a size-2 batch; the backward pass feeds the fused-map
    gradient to the ego branch and its inverse-shifted image to the
    received branch, so the extractor gradient is the sum of the two
    per-view contributions."""

    def __init__(self, model: FsCodModel, lr: float, momentum: float = 0.9,
                 optimizer: str = "adam"):
        self.model = model
        if optimizer == "adam":
            self.opt_extractor = Adam(model.extractor, lr, beta1=momentum)
            self.opt_detector = Adam(model.detector, lr, beta1=momentum)
        elif optimizer == "sgd":
            self.opt_extractor = SGD(model.extractor, lr, momentum)
            self.opt_detector = SGD(model.detector, lr, momentum)
        else:
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {optimizer!r}")

    def _detector_pass(self, fused: FeatureMap, lt: LossTargets) -> tuple[float, np.ndarray]:
        model = self.model
        raw = model.detector.forward(fused.values[None], train=True)
        a = model.cfg.num_anchors
        loss, draw = detection_loss(
            raw[0].reshape(a, 7, fused.h_f, fused.w_f), lt, model.cfg
        )
        model.detector.zero_grads()
        dfused = model.detector.backward(draw.reshape(1, a * 7, fused.h_f, fused.w_f))
        return loss, dfused[0]

    def step_coop(self, sample: TrainingSample, lt: LossTargets | None = None) -> float:
        model = self.model
        cfg = model.cfg
        if lt is None:
            lt = build_loss_targets(sample.targets, cfg)
        feats = model.extract_pair(sample.bev_ego, sample.bev_coop)
        own = FeatureMap(feats[0], cfg.s, sample.ego_pose, cfg.grid)
        received = FeatureMap(feats[1], cfg.s, sample.coop_pose, cfg.grid)
        aligned = translate_featuremap(received, sample.ego_pose, sample.coop_pose)
        fused = fuse(own, aligned)

        loss, dfused = self._detector_pass(fused, lt)

        # adjoint of the alignment shift: route the fused gradient back to
        # the received view's own grid, zero where it fell off
        back = translate_featuremap(
            FeatureMap(dfused, cfg.s, sample.ego_pose, cfg.grid),
            sample.coop_pose,
            sample.ego_pose,
        )
        model.extractor.zero_grads()
        model.extractor.backward(np.stack([dfused, back.values]))
        self.opt_extractor.step()
        self.opt_detector.step()
        return loss

    def step_single(self, sample: TrainingSample, lt: LossTargets | None = None) -> float:
        model = self.model
        if lt is None:
            lt = build_loss_targets(sample.targets, model.cfg)
        fmap = model.extract(sample.bev_ego, sample.ego_pose, train=True)
        loss, dfmap = self._detector_pass(fmap, lt)
        model.extractor.zero_grads()
        model.extractor.backward(dfmap[None])
        self.opt_extractor.step()
        self.opt_detector.step()
        return loss
