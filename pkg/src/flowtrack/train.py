"""SGD training of the detector head and the inter-frame offset head on the
three-term multi-task loss."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .boxes import encode_target, iou_matrix
from .config import TrainConfig
from .detect_head import AssignmentError, assign_targets
from .flow import estimate_flow
from .losses import LossConfig, RoiBatch, cls_logit_grads, head_probs, total_loss, total_loss_grad
from .tensor_core import DTYPE, sgd_step

log = logging.getLogger(__name__)

IGNORE_IOU = 0.3  # background slots overlapping a target this much are never sampled


class NoForegroundError(RuntimeError):
    pass


@dataclass
class Sample:
    frame: np.ndarray
    gt: list                    # visible target boxes at t
    slots: list                 # (cy, cx, a) rows of the RoI batch
    labels: np.ndarray
    t_targets: np.ndarray       # (len(slots), 4)
    next_frame: np.ndarray = None
    next_gt: dict = field(default_factory=dict)   # gt index at t -> box at t+τ
    flow: object = None


def build_samples(sequences, detector, train_cfg, flow_params=None):
    """Turn (frames, gt_records) sequences into fixed RoI samples.

    Each sample keeps every foreground slot plus ``negatives_per_positive``
    seeded background slots per target.
    """
    rng = np.random.default_rng([train_cfg.seed, 7])
    gap = train_cfg.frame_gap
    samples = []
    for frames, gts in sequences:
        for t, frame in enumerate(frames):
            if t >= len(gts) or gts[t].occluded:
                continue
            h, w = frame.shape[:2]
            anchors = detector.anchors_for(h, w)
            boxes = [gts[t].box]
            try:
                targets = assign_targets(boxes, anchors)
            except AssignmentError:
                continue
            fg = targets.foreground()
            prior_boxes = [anchors.prior_box(cx, cy, a)
                           for cy in range(anchors.grid_h) for cx in range(anchors.grid_w) for a in range(3)]
            overlap = iou_matrix(prior_boxes, boxes).max(axis=1)
            free = [i for i in np.flatnonzero(overlap < IGNORE_IOU)]
            n_neg = min(len(free), train_cfg.negatives_per_positive * len(fg))
            neg_idx = rng.choice(free, size=n_neg, replace=False) if n_neg else []
            neg = [(int(i) // (3 * anchors.grid_w), (int(i) // 3) % anchors.grid_w, int(i) % 3) for i in sorted(neg_idx)]
            slots = fg + neg
            labels = np.array([targets.label[s] for s in slots])
            t_targets = np.array([targets.t[s] for s in slots])
            s = Sample(frame, boxes, slots, labels, t_targets)
            u = t + gap
            if u < len(frames) and u < len(gts) and not gts[u].occluded:
                s.next_frame = frames[u]
                s.next_gt = {0: gts[u].box}
                s.flow = estimate_flow(frame, frames[u], flow_params)
            samples.append(s)
    if not samples or not any((s.labels >= 1).any() for s in samples):
        raise NoForegroundError("no foreground samples found in the training sequences")
    return samples


def train(detector, samples, train_cfg=None, loss_cfg=None, on_iteration=None):
    """Full-batch (or seeded mini-batch) SGD.  Returns the per-iteration log.

    Each log entry holds the loss evaluated *before* that iteration's update.
    """
    train_cfg = train_cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng([train_cfg.seed, 11])
    nets = [detector.net, detector.offset_net]
    velocity = [n.zero_grads() for n in nets]
    history = []
    for it in range(train_cfg.iterations):
        if train_cfg.frames_per_batch and train_cfg.frames_per_batch < len(samples):
            chosen = sorted(rng.choice(len(samples), size=train_cfg.frames_per_batch, replace=False))
        else:
            chosen = range(len(samples))
        rec, grads = evaluate_batch(detector, [samples[i] for i in chosen], loss_cfg, with_grads=True)
        rec["iteration"] = it
        history.append(rec)
        if on_iteration:
            on_iteration(rec)
        if train_cfg.clip_grad_norm:
            norm = np.sqrt(sum(float(np.sum(np.square(a, dtype=np.float64)))
                               for g in grads for layer in g for a in layer.values()))
            if norm > train_cfg.clip_grad_norm:
                scale = DTYPE(train_cfg.clip_grad_norm / norm)
                for g in grads:
                    for layer in g:
                        for k in layer:
                            layer[k] *= scale
        lr = train_cfg.lr_at(it)
        for net, g, v in zip(nets, grads, velocity):
            if train_cfg.momentum:
                for gl, vl in zip(g, v):
                    for k in gl:
                        vl[k] *= DTYPE(train_cfg.momentum)
                        vl[k] += gl[k]
                step = v
            else:
                step = g
            sgd_step(net, step, lr)
    return history


def evaluate_batch(detector, samples, loss_cfg=None, with_grads=False):
    """Loss (and optionally parameter gradients) over one batch of samples.

    All RoIs of all samples form a single batch, so the N, N_fg and N_cor
    normalisers span the whole batch.
    """
    loss_cfg = loss_cfg or LossConfig()
    feats_by_frame = {}
    passes = []
    for s in samples:
        raw, feats = detector.forward(s.frame)
        feats_by_frame[id(s.frame)] = feats
        rows = raw[tuple(np.array(s.slots).T)].astype(np.float64)
        passes.append({"rows": rows, "feats": feats, "raw_shape": raw.shape,
                       "cache": [layer._cache for layer in detector.net.layers]})
    for s, p in zip(samples, passes):
        _offset_rows(detector, s, p, feats_by_frame)

    batch = RoiBatch(
        np.concatenate([head_probs(p["rows"][:, 4], p["rows"][:, 5:]) for p in passes]),
        np.concatenate([s.labels for s in samples]),
        np.concatenate([p["rows"][:, :4] for p in passes]),
        np.concatenate([s.t_targets for s in samples]),
        np.concatenate([p["delta"] for p in passes]),
        np.concatenate([p["delta_star"] for p in passes]),
        np.concatenate([p["corr"] for p in passes]),
    )
    total, parts = total_loss(batch, loss_cfg)
    rec = {"total": total, **parts}
    if not with_grads:
        return rec

    g = total_loss_grad(batch, loss_cfg)
    rows_all = np.concatenate([p["rows"] for p in passes])
    g_obj, g_cls = cls_logit_grads(rows_all[:, 4], rows_all[:, 5:], batch.labels, batch.n)
    det_grads = detector.net.zero_grads()
    off_grads = detector.offset_net.zero_grads()
    start = 0
    for s, p in zip(samples, passes):
        n = len(s.slots)
        sl = slice(start, start + n)
        start += n
        for layer, cache in zip(detector.net.layers, p["cache"]):
            layer._cache = cache
        graw = np.zeros(p["raw_shape"], dtype=np.float64)
        idx = tuple(np.array(s.slots).T)
        graw[idx + (slice(0, 4),)] = g["b"][sl]
        graw[idx + (4,)] = g_obj[sl]
        graw[idx + (slice(5, None),)] = g_cls[sl]
        gh, gw = p["raw_shape"][:2]
        layer_grads, _ = detector.net.backward(graw.reshape(gh, gw, -1).astype(DTYPE))
        _accumulate(det_grads, layer_grads)
        if p["off_rows"] is not None:
            detector.offset_net.forward(p["off_in"])
            og, _ = detector.offset_net.backward(g["delta"][sl][p["off_rows"]].astype(DTYPE))
            _accumulate(off_grads, og)
    return rec, [det_grads, off_grads]


def _accumulate(total, grads):
    for t, g in zip(total, grads):
        for k in t:
            t[k] += g[k]


def _offset_rows(detector, s, p, feats_by_frame):
    """Fill the inter-frame regression columns of one sample's RoI rows.

    Backbone features feeding the offset head are treated as constants.
    """
    n = len(s.slots)
    p.update(delta=np.zeros((n, 4)), delta_star=np.zeros((n, 4)), corr=np.zeros(n, dtype=bool),
             off_rows=None, off_in=None)
    fg = np.flatnonzero(s.labels >= 1)
    if s.next_frame is None or not s.next_gt or fg.size == 0:
        return
    feats_next = feats_by_frame.get(id(s.next_frame))
    if feats_next is None:
        _, feats_next = detector.forward(s.next_frame)
        feats_by_frame[id(s.next_frame)] = feats_next
    roi = s.gt[0]
    x = np.stack([detector.offset_inputs(roi, s.flow, p["feats"], feats_next) for _ in fg])
    p["off_rows"], p["off_in"] = fg, x
    p["delta"][fg] = detector.offset_net.forward(x).astype(np.float64)
    p["delta_star"][fg] = tuple(encode_target(s.next_gt[0], roi, detector.convention))
    p["corr"][fg] = True
