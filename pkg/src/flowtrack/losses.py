"""Three-term multi-task detection/tracking objective.

    L = 1/N Σ CE(p_i, p_i*)
        + λ_reg / N_fg  Σ [p_i* ≥ 1] smoothL1(b_i, b_i*)
        + λ_frm / N_cor Σ [p_i* ≥ 1 ∧ corr_i] smoothL1(Δ_i, Δ_i*)

Empty foreground / correspondence sets make their term 0.  Everything is
evaluated in float64.
"""
from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


class LossValidationError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_reg: float = 1.0
    lambda_frm: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.lambda_reg < 0 or self.lambda_frm < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.beta <= 0:
            raise ValueError("smooth-L1 beta must be positive")


@dataclass
class RoiBatch:
    probs: np.ndarray        # (N, K+1), column 0 is background
    labels: np.ndarray       # (N,) int
    b: np.ndarray            # (N, 4) single-frame regression prediction
    b_star: np.ndarray       # (N, 4)
    delta: np.ndarray        # (N, 4) inter-frame regression prediction
    delta_star: np.ndarray   # (N, 4)
    corr_valid: np.ndarray   # (N,) bool

    def __post_init__(self):
        self.probs = np.atleast_2d(np.asarray(self.probs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        for name in ("b", "b_star", "delta", "delta_star"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1, 4))
        self.corr_valid = np.asarray(self.corr_valid, dtype=bool).reshape(-1)

    @property
    def n(self):
        return len(self.labels)

    @property
    def fg_mask(self):
        return self.labels >= 1

    @property
    def cor_mask(self):
        return self.fg_mask & self.corr_valid

    def validate(self):
        n = self.n
        if n < 1:
            raise LossValidationError("RoI batch must contain at least one entry")
        for name in ("probs", "b", "b_star", "delta", "delta_star", "corr_valid"):
            if len(getattr(self, name)) != n:
                raise LossValidationError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if np.any(self.probs < 0) or np.any(np.abs(self.probs.sum(axis=1) - 1) > 1e-5):
            raise LossValidationError("probability rows must be nonnegative and sum to 1")
        if np.any(self.labels < 0) or np.any(self.labels >= self.probs.shape[1]):
            raise IndexError("class label out of range")

    def permuted(self, perm):
        return RoiBatch(self.probs[perm], self.labels[perm], self.b[perm], self.b_star[perm],
                        self.delta[perm], self.delta_star[perm], self.corr_valid[perm])


def cls_loss(p, label):
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < len(p):
        raise IndexError(f"label {label} out of range for {len(p)} classes")
    return float(-np.log(max(p[label], PROB_FLOOR)))


def smooth_l1(d, d_star, beta=1.0):
    e = np.asarray(tuple(d), dtype=np.float64) - np.asarray(tuple(d_star), dtype=np.float64)
    a = np.abs(e)
    return float(np.where(a < beta, 0.5 * e * e / beta, a - 0.5 * beta).sum())


def _smooth_l1_rows(e, beta):
    a = np.abs(e)
    return np.where(a < beta, 0.5 * e * e / beta, a - 0.5 * beta).sum(axis=1)


def _smooth_l1_grad(e, beta):
    return np.where(np.abs(e) < beta, e / beta, np.sign(e))


def total_loss(batch, cfg=None):
    """Returns (total, {"cls": .., "reg": .., "frm": ..}) with weights applied."""
    cfg = cfg or LossConfig()
    batch.validate()
    n = batch.n
    p_true = batch.probs[np.arange(n), batch.labels]
    cls = float(np.sum(-np.log(np.maximum(p_true, PROB_FLOOR)))) / n
    fg, cor = batch.fg_mask, batch.cor_mask
    reg = frm = 0.0
    if fg.any():
        reg = cfg.lambda_reg * float(_smooth_l1_rows(batch.b[fg] - batch.b_star[fg], cfg.beta).sum()) / fg.sum()
    if cor.any():
        frm = cfg.lambda_frm * float(_smooth_l1_rows(batch.delta[cor] - batch.delta_star[cor], cfg.beta).sum()) / cor.sum()
    return cls + reg + frm, {"cls": cls, "reg": reg, "frm": frm}


def total_loss_grad(batch, cfg=None):
    """Analytic gradients w.r.t. probs, b and delta (same shapes as the inputs)."""
    cfg = cfg or LossConfig()
    batch.validate()
    n = batch.n
    rows = np.arange(n)
    g_probs = np.zeros_like(batch.probs)
    p_true = batch.probs[rows, batch.labels]
    # the floor clamp has zero derivative below it
    g_probs[rows, batch.labels] = np.where(p_true > PROB_FLOOR, -1.0 / np.maximum(p_true, PROB_FLOOR), 0.0) / n
    g_b = np.zeros_like(batch.b)
    g_d = np.zeros_like(batch.delta)
    fg, cor = batch.fg_mask, batch.cor_mask
    if fg.any():
        g_b[fg] = cfg.lambda_reg * _smooth_l1_grad(batch.b[fg] - batch.b_star[fg], cfg.beta) / fg.sum()
    if cor.any():
        g_d[cor] = cfg.lambda_frm * _smooth_l1_grad(batch.delta[cor] - batch.delta_star[cor], cfg.beta) / cor.sum()
    return {"probs": g_probs, "b": g_b, "delta": g_d}


def head_probs(obj_logit, cls_logits):
    """Map objectness + class logits onto a (K+1)-way distribution.

    p(bg) = 1 − σ(o),  p(k) = σ(o)·softmax(c)_k.
    """
    o = np.asarray(obj_logit, dtype=np.float64)
    c = np.asarray(cls_logits, dtype=np.float64)
    s = 1.0 / (1.0 + np.exp(-o))
    z = c - c.max(axis=-1, keepdims=True)
    sm = np.exp(z)
    sm /= sm.sum(axis=-1, keepdims=True)
    return np.concatenate([(1 - s)[..., None], s[..., None] * sm], axis=-1)


def cls_logit_grads(obj_logit, cls_logits, labels, n):
    """d(1/N Σ CE)/d(logits) for the ``head_probs`` mapping, in closed form.

    Equivalent to chaining ``total_loss_grad``'s probability gradient through
    ``head_probs`` but numerically stable for saturated logits.
    """
    o = np.asarray(obj_logit, dtype=np.float64)
    c = np.asarray(cls_logits, dtype=np.float64)
    labels = np.asarray(labels)
    s = 1.0 / (1.0 + np.exp(-o))
    z = c - c.max(axis=-1, keepdims=True)
    sm = np.exp(z)
    sm /= sm.sum(axis=-1, keepdims=True)
    fg = labels >= 1
    g_obj = np.where(fg, s - 1.0, s) / n
    onehot = np.zeros_like(c)
    idx = np.flatnonzero(fg)
    onehot[idx, labels[idx] - 1] = 1.0
    g_cls = np.where(fg[:, None], sm - onehot, 0.0) / n
    return g_obj, g_cls
