"""Single-scale grid-anchor detection head.

The raw head tensor has shape (G_y, G_x, 3, 5 + K): per anchor slot the four
box parameters t_x, t_y, t_w, t_h, an objectness logit, and K class logits.
Decoding follows the YOLO-v3 cell rule

    b_x = (σ(t_x) + c_x)·cell,  b_y = (σ(t_y) + c_y)·cell,
    b_w = p_w·exp(t_w),         b_h = p_h·exp(t_h).
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box, iou, iou_matrix
from .tensor_core import ShapeError, sigmoid

ANCHORS_PER_CELL = 3
# σ⁻¹ of a cell offset is clamped this far from 0 and 1 so targets stay finite
OFFSET_EPS = 1e-6


class AssignmentError(ValueError):
    pass


@dataclass
class AnchorSet:
    grid_w: int
    grid_h: int
    cell_size: float
    priors: tuple = ((16.0, 16.0), (24.0, 24.0), (36.0, 36.0))

    def __post_init__(self):
        self.priors = tuple(tuple(float(v) for v in p) for p in self.priors)
        if len(self.priors) != ANCHORS_PER_CELL:
            raise ValueError(f"exactly {ANCHORS_PER_CELL} priors per cell are required")
        if any(v <= 0 for p in self.priors for v in p):
            raise ValueError("anchor priors must be positive")
        if self.grid_w < 1 or self.grid_h < 1 or self.cell_size <= 0:
            raise ValueError("grid dims and cell size must be positive")

    def prior_box(self, cx, cy, a):
        pw, ph = self.priors[a]
        return Box((cx + 0.5) * self.cell_size, (cy + 0.5) * self.cell_size, pw, ph)


@dataclass
class Detection:
    box: Box
    score: float
    class_id: int = 0
    order: int = 0  # decode slot index, used for deterministic tie-breaks
    embedding: np.ndarray = field(default=None, repr=False, compare=False)


def _logit(p):
    return math.log(p / (1.0 - p))


def decode_cell(t, cell_offset, prior, cell_size=1.0):
    tx, ty, tw, th = (float(v) for v in t)
    cx, cy = cell_offset
    pw, ph = prior
    return Box(
        (float(sigmoid(np.float64(tx))) + cx) * cell_size,
        (float(sigmoid(np.float64(ty))) + cy) * cell_size,
        pw * math.exp(tw),
        ph * math.exp(th),
    )


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def slot_scores(raw):
    """(G_y, G_x, 3, K) per-class scores σ(obj)·softmax(cls)."""
    obj = sigmoid(raw[..., 4].astype(np.float64))
    return obj[..., None] * _softmax(raw[..., 5:].astype(np.float64))


def decode_all(raw, anchors, score_threshold=0.3):
    """Decode every (cell, anchor) slot and keep those scoring ≥ threshold.

    Each slot yields at most one detection, labelled with its best class.
    Order is row-major over cells, then anchor index.
    """
    raw = np.asarray(raw)
    if raw.ndim != 4 or raw.shape[:3] != (anchors.grid_h, anchors.grid_w, ANCHORS_PER_CELL) or raw.shape[3] < 6:
        raise ShapeError(f"raw prediction shape {raw.shape} does not match grid "
                         f"{anchors.grid_h}x{anchors.grid_w}x{ANCHORS_PER_CELL}x(5+K)")
    r = raw.astype(np.float64)
    scores = slot_scores(r)
    cls = scores.argmax(axis=-1)
    best = np.take_along_axis(scores, cls[..., None], axis=-1)[..., 0]
    gy, gx = np.meshgrid(np.arange(anchors.grid_h), np.arange(anchors.grid_w), indexing="ij")
    pri = np.array(anchors.priors)
    bx = (sigmoid(r[..., 0]) + gx[..., None]) * anchors.cell_size
    by = (sigmoid(r[..., 1]) + gy[..., None]) * anchors.cell_size
    bw = pri[:, 0] * np.exp(r[..., 2])
    bh = pri[:, 1] * np.exp(r[..., 3])
    keep = np.flatnonzero((best >= score_threshold).ravel())
    flat = [a.ravel() for a in (bx, by, bw, bh, best, cls)]
    return [
        Detection(Box(float(flat[0][i]), float(flat[1][i]), float(flat[2][i]), float(flat[3][i])),
                  float(flat[4][i]), int(flat[5][i]), order=int(i))
        for i in keep
    ]


def cell_of(x, y, anchors):
    """Grid cell containing a point; cells are half-open [k·cell, (k+1)·cell)."""
    cx = math.floor(x / anchors.cell_size)
    cy = math.floor(y / anchors.cell_size)
    if not (0 <= cx < anchors.grid_w and 0 <= cy < anchors.grid_h):
        raise AssignmentError(f"box center ({x}, {y}) lies outside the {anchors.grid_w}x{anchors.grid_h} grid")
    return cx, cy


def best_prior(box, anchors):
    """Index of the prior (centered on the box) with highest IoU; ties → lowest index."""
    best, best_iou = 0, -1.0
    for a, (pw, ph) in enumerate(anchors.priors):
        v = iou(Box(box.x, box.y, box.w, box.h), Box(box.x, box.y, pw, ph))
        if v > best_iou:
            best, best_iou = a, v
    return best


@dataclass
class SlotTargets:
    """Dense per-slot targets.  ``label`` 0 is background; ``t`` is valid where label ≥ 1."""
    label: np.ndarray       # (G_y, G_x, 3) int
    t: np.ndarray           # (G_y, G_x, 3, 4) float64
    gt_index: np.ndarray    # (G_y, G_x, 3) int, -1 where unassigned

    def foreground(self):
        return [tuple(int(v) for v in idx) for idx in np.argwhere(self.label >= 1)]


def encode_cell_target(box, cell, prior_idx, anchors):
    """Exact t-values that decode_cell maps back onto ``box``."""
    cx, cy = cell
    fx = min(max(box.x / anchors.cell_size - cx, OFFSET_EPS), 1 - OFFSET_EPS)
    fy = min(max(box.y / anchors.cell_size - cy, OFFSET_EPS), 1 - OFFSET_EPS)
    pw, ph = anchors.priors[prior_idx]
    tx = 0.0 if fx == 0.5 else _logit(fx)
    ty = 0.0 if fy == 0.5 else _logit(fy)
    return (tx, ty, math.log(box.w / pw), math.log(box.h / ph))


def assign_targets(gt_boxes, anchors, classes=None):
    shape = (anchors.grid_h, anchors.grid_w, ANCHORS_PER_CELL)
    label = np.zeros(shape, dtype=np.int64)
    t = np.zeros(shape + (4,), dtype=np.float64)
    gt_index = np.full(shape, -1, dtype=np.int64)
    for i, box in enumerate(gt_boxes):
        cx, cy = cell_of(box.x, box.y, anchors)
        a = best_prior(box, anchors)
        label[cy, cx, a] = 1 if classes is None else int(classes[i])
        t[cy, cx, a] = encode_cell_target(box, (cx, cy), a, anchors)
        gt_index[cy, cx, a] = i
    return SlotTargets(label, t, gt_index)


def nms(dets, iou_threshold=0.45):
    """Greedy per-class suppression; result sorted by score descending."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].order, i))
    kept = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def nms_fast(dets, iou_threshold=0.45):
    """Same result as ``nms`` using a precomputed IoU matrix."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].order, i))
    m = iou_matrix([dets[i].box for i in order], [dets[i].box for i in order])
    cls = np.array([dets[i].class_id for i in order])
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for j in range(len(order)):
        if suppressed[j]:
            continue
        kept.append(dets[order[j]])
        suppressed |= (m[j] > iou_threshold) & (cls == cls[j])
    return kept
