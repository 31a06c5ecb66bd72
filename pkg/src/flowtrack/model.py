"""Detector = conv backbone + grid-anchor head, plus the small dense head that
regresses inter-frame box offsets from flow and appearance features."""
import numpy as np

from .boxes import Box, EncodingConvention, encode_delta
from .config import DetectorConfig
from .detect_head import ANCHORS_PER_CELL, AnchorSet, decode_all, nms_fast
from .flow import flow_offset_for_box, propagate_box
from .tensor_core import DTYPE, Network, WeightFileError, read_weights, write_weights

PIXEL_MEAN = 128.0
PIXEL_SCALE = 64.0


def preprocess(frame):
    f = np.asarray(frame, dtype=DTYPE)
    if f.ndim == 2:
        f = f[:, :, None]
    return (f - DTYPE(PIXEL_MEAN)) / DTYPE(PIXEL_SCALE)


def _overlap(lo, hi, n, cell_size):
    """Length of [lo, hi] inside each of the ``n`` cells along one axis."""
    edges = np.arange(n + 1, dtype=np.float64) * cell_size
    return np.clip(np.minimum(hi, edges[1:]) - np.maximum(lo, edges[:-1]), 0.0, None)


def pool_features(features, box, cell_size):
    """Feature map averaged over ``box``, each cell weighted by the area it
    shares with the box, so the result moves smoothly with the box.  Falls
    back to the cell nearest the box center when the box misses the grid.
    Returns float64."""
    gh, gw, _ = features.shape
    x0, y0, x1, y1 = box.corners()
    wx = _overlap(x0, x1, gw, cell_size)
    wy = _overlap(y0, y1, gh, cell_size)
    total = wx.sum() * wy.sum()
    if total <= 0:
        cx = min(gw - 1, max(0, int(box.x // cell_size)))
        cy = min(gh - 1, max(0, int(box.y // cell_size)))
        return features[cy, cx].astype(np.float64)
    return np.einsum("y,x,yxc->c", wy, wx, features.astype(np.float64)) / total


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / n


class Detector:
    def __init__(self, cfg=None, seed=0, convention=EncodingConvention.RCNN_STANDARD):
        self.cfg = cfg or DetectorConfig()
        self.convention = EncodingConvention.parse(convention)
        self.net = Network.from_spec(self.cfg.layers, seed=seed)
        self.offset_net = Network.from_spec(self.cfg.offset_layers, seed=seed + 1)
        self.slot_width = 5 + self.cfg.num_classes
        out_ch = self.net.layers[-1].out_channels if hasattr(self.net.layers[-1], "out_channels") else None
        if out_ch != ANCHORS_PER_CELL * self.slot_width:
            raise ValueError(f"detector head must output {ANCHORS_PER_CELL * self.slot_width} channels")
        self._anchors = {}

    def anchors_for(self, height, width):
        key = (height, width)
        if key not in self._anchors:
            gh, gw, _ = self.net.output_shape((height, width, 1))
            self._anchors[key] = AnchorSet(gw, gh, float(self.cfg.cell_size), tuple(map(tuple, self.cfg.priors)))
        return self._anchors[key]

    def forward(self, frame):
        """Returns (raw head tensor (G_y, G_x, 3, 5+K), penultimate features)."""
        x = preprocess(frame)
        out = self.net.forward(x)
        gh, gw, _ = out.shape
        raw = out.reshape(gh, gw, ANCHORS_PER_CELL, self.slot_width)
        feats = self.net.activations[-2]
        return raw, feats

    def embed(self, features, box):
        return unit(pool_features(features, box, self.cfg.cell_size))

    def detect(self, frame):
        """Scored, NMS-filtered detections with L2-normalized appearance embeddings."""
        h, w = np.shape(frame)[:2]
        raw, feats = self.forward(frame)
        dets = decode_all(raw, self.anchors_for(h, w), self.cfg.score_threshold)
        dets = nms_fast(dets, self.cfg.nms_iou)
        for d in dets:
            d.embedding = self.embed(feats, d.box)
        return dets

    # -- inter-frame offset head ---------------------------------------------

    def offset_inputs(self, roi, field, feats_a, feats_b):
        """Input row for the offset head: flow-implied delta + pooled features at t and t+τ."""
        try:
            moved = propagate_box(roi, flow_offset_for_box(field, roi))
        except ValueError:
            moved = roi
        d = encode_delta(moved, roi, self.convention)
        return np.concatenate([
            np.array(tuple(d)),
            pool_features(feats_a, roi, self.cfg.cell_size),
            pool_features(feats_b, roi, self.cfg.cell_size),
        ]).astype(DTYPE)

    # -- weights ---------------------------------------------------------------

    @property
    def layers(self):
        return self.net.layers + self.offset_net.layers

    def save(self, fh):
        write_weights(fh, self.layers)

    def load(self, fh):
        layers = read_weights(fh)
        mine = self.layers
        if len(layers) != len(mine):
            raise WeightFileError(f"weight file has {len(layers)} layers, config expects {len(mine)}")
        for i, (src, dst) in enumerate(zip(layers, mine)):
            if _signature(src) != _signature(dst):
                raise WeightFileError(f"layer {i} in weight file does not match the configured architecture")
            for k in dst.params:
                dst.params[k] = src.params[k].copy()
        return self


def _signature(layer):
    attrs = ("kernel_h", "kernel_w", "in_channels", "out_channels", "stride", "padding", "activation",
             "depthwise_separable", "in_dim", "out_dim", "window")
    return (layer.kind,) + tuple(getattr(layer, a, None) for a in attrs)


def load_detector(path, cfg=None, convention=EncodingConvention.RCNN_STANDARD):
    det = Detector(cfg, convention=convention)
    with open(path, "rb") as fh:
        det.load(fh)
    return det
