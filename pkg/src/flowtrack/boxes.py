"""Center-format boxes, IoU, and inter-frame offset encoding.

Two offset conventions are supported:

* ``rcnn_standard``: center shift divided by the anchor size (the classic
  R-CNN parameterization, pipeline default).
* ``paper_literal``: center shift divided by the anchor *center coordinate*,
  exactly as the offset equations are printed.  Needs a_x, a_y != 0.

Both use log size ratios for width/height.
"""
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class DegenerateAnchorError(ValueError):
    pass


class EncodingConvention(str, Enum):
    PAPER_LITERAL = "paper_literal"
    RCNN_STANDARD = "rcnn_standard"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).replace("-", "_"))
        except ValueError:
            raise ValueError(f"unknown encoding convention {value!r}") from None


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float

    def __iter__(self):
        return iter((self.x, self.y, self.w, self.h))

    @property
    def area(self):
        return self.w * self.h

    @property
    def diagonal(self):
        return math.hypot(self.w, self.h)

    def corners(self):
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    @classmethod
    def from_corners(cls, x0, y0, x1, y1):
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def is_valid(self):
        return all(math.isfinite(v) for v in self) and self.w > 0 and self.h > 0


@dataclass(frozen=True)
class Delta:
    dx: float
    dy: float
    dw: float
    dh: float

    def __iter__(self):
        return iter((self.dx, self.dy, self.dw, self.dh))

    def as_array(self):
        return np.array(tuple(self), dtype=np.float64)


def iou(a, b):
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou_matrix(boxes_a, boxes_b):
    """Pairwise IoU, shape (len(a), len(b)), vectorised."""
    if len(boxes_a) == 0 or len(boxes_b) == 0:
        return np.zeros((len(boxes_a), len(boxes_b)))
    a = np.array([tuple(b) for b in boxes_a], dtype=np.float64)
    b = np.array([tuple(b) for b in boxes_b], dtype=np.float64)
    a0 = a[:, None, :2] - a[:, None, 2:] / 2
    a1 = a[:, None, :2] + a[:, None, 2:] / 2
    b0 = b[None, :, :2] - b[None, :, 2:] / 2
    b1 = b[None, :, :2] + b[None, :, 2:] / 2
    wh = np.clip(np.minimum(a1, b1) - np.maximum(a0, b0), 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = (a[:, None, 2] * a[:, None, 3]) + (b[None, :, 2] * b[None, :, 3]) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)


def _center_scale(a, convention):
    if convention is EncodingConvention.PAPER_LITERAL:
        if a.x == 0 or a.y == 0:
            raise DegenerateAnchorError(f"paper_literal encoding needs a nonzero anchor center, got {a}")
        return a.x, a.y
    return a.w, a.h


def encode_delta(p, a, convention=EncodingConvention.RCNN_STANDARD):
    """Offset of box ``p`` relative to anchor ``a`` (computed in double precision)."""
    convention = EncodingConvention.parse(convention)
    if not (a.w > 0 and a.h > 0):
        raise DegenerateAnchorError(f"anchor must have positive size, got {a}")
    sx, sy = _center_scale(a, convention)
    return Delta(
        (float(p.x) - a.x) / sx,
        (float(p.y) - a.y) / sy,
        math.log(float(p.w) / a.w),
        math.log(float(p.h) / a.h),
    )


def encode_target(b, a, convention=EncodingConvention.RCNN_STANDARD):
    # the regression target uses the same parameterization as the prediction
    return encode_delta(b, a, convention)


def decode_delta(d, a, convention=EncodingConvention.RCNN_STANDARD):
    convention = EncodingConvention.parse(convention)
    if convention is EncodingConvention.PAPER_LITERAL:
        x = a.x * (1.0 + d.dx)
        y = a.y * (1.0 + d.dy)
    else:
        x = a.x + d.dx * a.w
        y = a.y + d.dy * a.h
    return Box(x, y, a.w * math.exp(d.dw), a.h * math.exp(d.dh))
