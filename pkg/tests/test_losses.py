import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtrack.boxes import Delta
from flowtrack.losses import (
    LossConfig, LossValidationError, RoiBatch, cls_logit_grads, cls_loss, head_probs, smooth_l1, total_loss,
    total_loss_grad,
)


def random_batch(rng, n=6, n_fg=3, k=2, n_cor=None, scale=1.5):
    probs = rng.dirichlet(np.ones(k + 1), size=n)
    labels = np.zeros(n, dtype=int)
    labels[:n_fg] = rng.integers(1, k + 1, n_fg)
    rng.shuffle(labels)
    corr = np.zeros(n, bool)
    fg_idx = np.flatnonzero(labels)
    take = len(fg_idx) if n_cor is None else n_cor
    corr[fg_idx[:take]] = True
    corr[rng.integers(0, n)] |= True   # a background row with a correspondence must still not count
    return RoiBatch(probs, labels, rng.normal(0, scale, (n, 4)), rng.normal(0, scale, (n, 4)),
                    rng.normal(0, scale, (n, 4)), rng.normal(0, scale, (n, 4)), corr)


def oracle_loss(batch, lam_reg=1.0, lam_frm=1.0, beta=1.0):
    """Scalar-loop evaluation of the three-term objective."""
    def sl1(u, v):
        s = 0.0
        for a, b in zip(u, v):
            e = abs(float(a) - float(b))
            s += 0.5 * e * e / beta if e < beta else e - 0.5 * beta
        return s

    n = len(batch.labels)
    cls = sum(-math.log(max(float(batch.probs[i][batch.labels[i]]), 1e-12)) for i in range(n)) / n
    fg = [i for i in range(n) if batch.labels[i] >= 1]
    cor = [i for i in fg if batch.corr_valid[i]]
    reg = lam_reg * sum(sl1(batch.b[i], batch.b_star[i]) for i in fg) / len(fg) if fg else 0.0
    frm = lam_frm * sum(sl1(batch.delta[i], batch.delta_star[i]) for i in cor) / len(cor) if cor else 0.0
    return cls + reg + frm, cls, reg, frm


# -- scalar pieces -----------------------------------------------------------------

def test_cls_loss_values():
    assert cls_loss([0, 1, 0], 1) == 0.0
    assert cls_loss([0.25] * 4, 2) == pytest.approx(math.log(4))
    assert cls_loss([0.8, 0.2], 1) == pytest.approx(1.6094379124341003)


def test_cls_loss_clamps_zero_probability():
    assert cls_loss([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))


def test_cls_loss_label_out_of_range():
    with pytest.raises(IndexError):
        cls_loss([0.5, 0.5], 2)


def test_smooth_l1_values():
    d = Delta(1, 2, 3, 4)
    assert smooth_l1(d, d) == 0
    assert smooth_l1(Delta(0.5, 0, 0, 0), Delta(0, 0, 0, 0)) == pytest.approx(0.125)
    assert smooth_l1(Delta(2, 0, 0, 0), Delta(0, 0, 0, 0)) == pytest.approx(1.5)


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(lambda_reg=-1)
    with pytest.raises(ValueError):
        LossConfig(beta=0)


# -- total loss ------------------------------------------------------------------------

def perfect_batch(n=4):
    probs = np.zeros((n, 2))
    labels = np.array([1, 0, 1, 0][:n])
    probs[np.arange(n), labels] = 1
    b = np.random.default_rng(0).normal(size=(n, 4))
    return RoiBatch(probs, labels, b, b.copy(), b, b.copy(), np.ones(n, bool))


def test_perfect_batch_is_zero_with_zero_regression_gradients():
    batch = perfect_batch()
    total, parts = total_loss(batch)
    assert total == 0 and parts == {"cls": 0, "reg": 0, "frm": 0}
    g = total_loss_grad(batch)
    assert not np.any(g["b"]) and not np.any(g["delta"])


def test_all_background_batch_is_cls_only():
    rng = np.random.default_rng(1)
    batch = random_batch(rng, n=5, n_fg=0)
    total, parts = total_loss(batch)
    assert parts["reg"] == 0 and parts["frm"] == 0
    assert total == pytest.approx(parts["cls"])
    assert not np.isnan(total)


def test_foreground_without_correspondence_has_zero_frm():
    batch = random_batch(np.random.default_rng(2), n=6, n_fg=3, n_cor=0)
    batch.corr_valid[:] = False
    _, parts = total_loss(batch)
    assert parts["frm"] == 0 and parts["reg"] > 0


def test_matches_oracle_on_hundred_batches():
    rng = np.random.default_rng(7)
    for i in range(100):
        cfg = LossConfig(lambda_reg=float(rng.uniform(0, 3)), lambda_frm=float(rng.uniform(0, 3)),
                         beta=float(rng.uniform(0.2, 2)))
        batch = random_batch(rng, n=int(rng.integers(1, 12)), n_fg=0, k=int(rng.integers(1, 4)))
        n_fg = int(rng.integers(0, batch.n + 1))
        batch.labels[:n_fg] = rng.integers(1, batch.probs.shape[1], n_fg)
        total, parts = total_loss(batch, cfg)
        ref = oracle_loss(batch, cfg.lambda_reg, cfg.lambda_frm, cfg.beta)
        assert total == pytest.approx(ref[0], abs=1e-6)
        assert (parts["cls"], parts["reg"], parts["frm"]) == pytest.approx(ref[1:], abs=1e-6)


def test_lambda_frm_scales_linearly():
    batch = random_batch(np.random.default_rng(3))
    _, p1 = total_loss(batch, LossConfig(lambda_frm=1.0))
    _, p3 = total_loss(batch, LossConfig(lambda_frm=3.0))
    assert p3["frm"] == pytest.approx(3 * p1["frm"], rel=1e-12)
    assert (p3["cls"], p3["reg"]) == (p1["cls"], p1["reg"])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_loss_nonnegative_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, n=int(rng.integers(1, 10)), n_fg=0)
    batch.labels[: int(rng.integers(0, batch.n + 1))] = 1
    total, _ = total_loss(batch)
    assert total >= 0
    perm = rng.permutation(batch.n)
    assert total_loss(batch.permuted(perm))[0] == pytest.approx(total, rel=1e-12, abs=1e-15)


def test_invalid_probability_rows():
    batch = random_batch(np.random.default_rng(4))
    batch.probs[0] = [0.5, 0.6, -0.1]
    with pytest.raises(LossValidationError):
        total_loss(batch)
    batch.probs[0] = [0.5, 0.4, 0.3]
    with pytest.raises(LossValidationError):
        total_loss(batch)


def test_empty_batch_rejected():
    with pytest.raises(LossValidationError):
        total_loss(RoiBatch(np.zeros((0, 2)), [], np.zeros((0, 4)), np.zeros((0, 4)), np.zeros((0, 4)),
                            np.zeros((0, 4)), []))


# -- gradients -------------------------------------------------------------------------------

STEP = 1e-5


def _fd_check(batch, cfg):
    """Compare every analytic gradient coordinate with central differences.

    Probability rows are constrained to the simplex, so each probability
    coordinate is checked along the direction e_label − e_other, which keeps
    the row normalized.  Returns (checked, failed) counts.
    """
    g = total_loss_grad(batch, cfg)
    checked = failed = 0

    def f():
        return total_loss(batch, cfg)[0]

    for name, target in (("b", batch.b_star), ("delta", batch.delta_star)):
        arr = getattr(batch, name)
        for idx in np.ndindex(arr.shape):
            e = arr[idx] - target[idx]
            if abs(abs(e) - cfg.beta) < 10 * STEP:
                continue   # straddles the smooth-L1 kink
            old = arr[idx]
            arr[idx] = old + STEP
            fp = f()
            arr[idx] = old - STEP
            fm = f()
            arr[idx] = old
            num = (fp - fm) / (2 * STEP)
            checked += 1
            if abs(num - g[name][idx]) > 1e-4 * max(abs(num), abs(g[name][idx])) + 1e-10:
                failed += 1
    for i in range(batch.n):
        lab = batch.labels[i]
        other = (lab + 1) % batch.probs.shape[1]
        row = batch.probs[i]
        if min(row[lab], row[other]) < 10 * STEP:
            continue
        old = row.copy()
        row[lab] += STEP
        row[other] -= STEP
        fp = f()
        row[:] = old
        row[lab] -= STEP
        row[other] += STEP
        fm = f()
        row[:] = old
        num = (fp - fm) / (2 * STEP)
        ana = g["probs"][i, lab] - g["probs"][i, other]
        checked += 1
        if abs(num - ana) > 1e-4 * max(abs(num), abs(ana)) + 1e-10:
            failed += 1
    return checked, failed


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_central_differences(seed):
    rng = np.random.default_rng(seed)
    batch = random_batch(rng, n=8, n_fg=4, k=2)
    checked, failed = _fd_check(batch, LossConfig(lambda_reg=1.3, lambda_frm=0.7, beta=1.0))
    assert checked > 60
    assert failed == 0


def test_background_rows_have_exactly_zero_regression_gradient():
    batch = random_batch(np.random.default_rng(9), n=10, n_fg=4)
    g = total_loss_grad(batch)
    bg = batch.labels == 0
    assert np.all(g["b"][bg] == 0) and np.all(g["delta"][bg] == 0)
    # foreground rows without a correspondence get no inter-frame gradient either
    no_cor = (batch.labels >= 1) & ~batch.corr_valid
    assert np.all(g["delta"][no_cor] == 0)


def test_head_probs_is_a_distribution():
    rng = np.random.default_rng(0)
    p = head_probs(rng.normal(0, 5, 20), rng.normal(0, 5, (20, 3)))
    assert p.shape == (20, 4)
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-12)
    assert np.all(p >= 0)


def test_cls_logit_grads_match_finite_differences():
    rng = np.random.default_rng(5)
    n, k = 7, 3
    o, c = rng.normal(0, 1.5, n), rng.normal(0, 1.5, (n, k))
    labels = np.array([0, 1, 2, 3, 0, 2, 1])

    def f():
        p = head_probs(o, c)
        return float(np.mean(-np.log(p[np.arange(n), labels])))

    g_obj, g_cls = cls_logit_grads(o, c, labels, n)
    for arr, g in ((o, g_obj), (c, g_cls)):
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + STEP
            fp = f()
            arr[idx] = old - STEP
            fm = f()
            arr[idx] = old
            assert (fp - fm) / (2 * STEP) == pytest.approx(g[idx], rel=1e-4, abs=1e-9)
