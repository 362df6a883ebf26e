"""Oriented-box detection decoding, IoU, NMS, matching, and scoring."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BevGrid
from .types import OrientedBox


@dataclass(frozen=True)
class Detection:
    box: OrientedBox
    confidence: float


@dataclass
class DetectionGrid:
    """Raw head output: values (A, 7, H_f, W_f), one 7-vector per anchor
    per cell, channels (tx, ty, tw, tl, sin, cos, conf). Raw means
    pre-sigmoid, pre-exp."""

    values: np.ndarray
    anchors: tuple[tuple[float, float], ...]
    grid: BevGrid
    s: int

    def __post_init__(self):
        a = len(self.anchors)
        cells = self.grid.size // self.s
        if self.values.shape != (a, 7, cells, cells):
            raise ValueError(
                f"detection values shape {self.values.shape}, expected {(a, 7, cells, cells)}"
            )

    @property
    def cell_m(self) -> float:
        return self.s / self.grid.resolution


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically safe logistic; tolerates +/-inf without overflow."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def decode(dgrid: DetectionGrid, conf_threshold: float) -> list[Detection]:
    """Decode cells whose sigmoid confidence reaches the threshold.

    Centres land inside their owning cell; sides are anchor * exp(t),
    with t clipped to +/-10 so a wild logit cannot overflow; yaw comes
    from atan2 of the raw (sin, cos) pair.
    """
    v = dgrid.values.astype(np.float64)
    conf = sigmoid(v[:, 6])
    a_idx, xs, ys = np.nonzero(conf >= conf_threshold)
    cell = dgrid.cell_m
    extent = dgrid.grid.extent_m
    out: list[Detection] = []
    for a, ix, iy in zip(a_idx.tolist(), xs.tolist(), ys.tolist()):
        tx, ty, tw, tl, sn, cs = v[a, :6, ix, iy]
        aw, al = dgrid.anchors[a]
        cx = (ix + float(sigmoid(tx))) * cell - extent
        cy = (iy + float(sigmoid(ty))) * cell - extent
        w = aw * math.exp(float(np.clip(tw, -10.0, 10.0)))
        l = al * math.exp(float(np.clip(tl, -10.0, 10.0)))
        yaw = math.atan2(sn, cs) if (sn != 0.0 or cs != 0.0) else 0.0
        out.append(Detection(OrientedBox(cx, cy, w, l, yaw), float(conf[a, ix, iy])))
    return out


def _clip_by_edge(poly: list[tuple[float, float]], a, b) -> list[tuple[float, float]]:
    # keep the half-plane left of the directed edge a->b (CCW interior)
    ex, ey = b[0] - a[0], b[1] - a[1]
    out: list[tuple[float, float]] = []
    n = len(poly)
    for i in range(n):
        p = poly[i]
        q = poly[(i + 1) % n]
        side_p = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        side_q = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        if side_p >= 0:
            out.append(p)
        if (side_p > 0 and side_q < 0) or (side_p < 0 and side_q > 0):
            t = side_p / (side_p - side_q)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _shoelace(poly: list[tuple[float, float]]) -> float:
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def intersection_area(a: OrientedBox, b: OrientedBox) -> float:
    """Exact overlap area of two footprints by convex polygon clipping."""
    poly = [tuple(p) for p in a.corners()]
    clip = [tuple(p) for p in b.corners()]
    for i in range(4):
        poly = _clip_by_edge(poly, clip[i], clip[(i + 1) % 4])
        if not poly:
            return 0.0
    area = _shoelace(poly)
    # clamp float slivers
    return float(min(max(area, 0.0), a.area, b.area))


def iou(a: OrientedBox, b: OrientedBox) -> float:
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def _det_order(d: Detection) -> tuple:
    return (-d.confidence, d.box.cx, d.box.cy)


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy suppression by descending confidence; ties broken by
    (confidence, cx, cy) so the result is deterministic. Idempotent."""
    pending = sorted(dets, key=_det_order)
    kept: list[Detection] = []
    for d in pending:
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    det_matched: list[bool]
    gt_matched: list[bool]

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if (self.tp + self.fp) > 0 else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if (self.tp + self.fn) > 0 else 1.0


def match_detections(
    dets: list[Detection], gts: list[OrientedBox], iou_threshold: float = 0.5
) -> MatchResult:
    """One-to-one greedy matching by descending confidence.

    Each detection claims the unmatched ground-truth box of highest IoU,
    provided that IoU reaches the threshold. Detection order uses the
    same deterministic tie-break as nms().
    """
    order = sorted(range(len(dets)), key=lambda i: _det_order(dets[i]))
    det_matched = [False] * len(dets)
    gt_matched = [False] * len(gts)
    for i in order:
        best_j = -1
        best_iou = 0.0
        for j, g in enumerate(gts):
            if gt_matched[j]:
                continue
            v = iou(dets[i].box, g)
            if v >= iou_threshold and v > best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            det_matched[i] = True
            gt_matched[best_j] = True
    tp = sum(gt_matched)
    return MatchResult(
        tp=tp,
        fp=len(dets) - tp,
        fn=len(gts) - tp,
        det_matched=det_matched,
        gt_matched=gt_matched,
    )


def categorize_targets(
    gts: list[OrientedBox],
    baseline_ego_dets: list[Detection],
    baseline_coop_dets: list[Detection],
    iou_threshold: float = 0.5,
) -> list[int]:
    """Per-target count of single-view baseline runs that detect it.

    0: neither view's baseline matched the target, 1: exactly one did,
    2: both did. Both detection lists must already be in the ego frame.
    """
    ego = match_detections(baseline_ego_dets, gts, iou_threshold)
    coop = match_detections(baseline_coop_dets, gts, iou_threshold)
    return [int(e) + int(c) for e, c in zip(ego.gt_matched, coop.gt_matched)]


def aggregate_matches(
    det_frames: list[list[Detection]],
    gt_frames: list[list[OrientedBox]],
    iou_threshold: float = 0.5,
) -> tuple[float, float, list[MatchResult]]:
    """Pooled precision and recall over a list of frames, plus the
    per-frame match results. Matching never crosses frames."""
    if len(det_frames) != len(gt_frames):
        raise ValueError("detection and ground-truth frame counts differ")
    results = [
        match_detections(d, g, iou_threshold) for d, g in zip(det_frames, gt_frames)
    ]
    tp = sum(r.tp for r in results)
    fp = sum(r.fp for r in results)
    fn = sum(r.fn for r in results)
    precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 1.0
    return precision, recall, results


def pr_vs_iou_sweep(
    det_frames: list[list[Detection]],
    gt_frames: list[list[OrientedBox]],
    thresholds: list[float],
) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) rows, matching redone per threshold."""
    rows = []
    for t in thresholds:
        p, r, _ = aggregate_matches(det_frames, gt_frames, t)
        rows.append((float(t), p, r))
    return rows
