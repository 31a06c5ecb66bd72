import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtrack.boxes import Box, iou
from flowtrack.detect_head import (
    ANCHORS_PER_CELL, AnchorSet, AssignmentError, Detection, assign_targets, decode_all, decode_cell, nms, nms_fast,
)
from flowtrack.tensor_core import ShapeError

PRIORS = ((16.0, 16.0), (24.0, 24.0), (36.0, 36.0))


def anchors(gw=5, gh=4, cell=16.0):
    return AnchorSet(gw, gh, cell, PRIORS)


def test_decode_cell_zero_t_is_cell_center_with_prior():
    assert decode_cell((0, 0, 0, 0), (3, 4), (10, 20), 1.0) == Box(3.5, 4.5, 10, 20)


def test_decode_cell_log2_doubles_width():
    b = decode_cell((0, 0, math.log(2), 0), (0, 0), (7, 9))
    assert b.w == pytest.approx(14)
    assert b.h == 9


def test_decode_cell_sigmoid_one_high_precision():
    getcontext().prec = 40
    expected = Decimal(1) / (Decimal(1) + Decimal(-1).exp())
    assert decode_cell((1, 0, 0, 0), (0, 0), (1, 1)).x == pytest.approx(float(expected), abs=1e-12)


def test_decode_cell_sigma_bounds_over_random_values():
    rng = np.random.default_rng(0)
    t = rng.uniform(-50, 50, (10_000, 4))
    t[:, 2:] = rng.uniform(-5, 5, (10_000, 2))
    for row in t:
        b = decode_cell(row, (2, 7), (12, 30), 16.0)
        assert 2 * 16 <= b.x <= 3 * 16
        assert 7 * 16 <= b.y <= 8 * 16
        assert b.w > 0 and b.h > 0


def _loop_decode(raw, a, thr):
    """Brute-force oracle: every slot in row-major order, scored σ(obj)·softmax."""
    out = []
    gh, gw, na, _ = raw.shape
    for cy in range(gh):
        for cx in range(gw):
            for k in range(na):
                r = raw[cy, cx, k].astype(np.float64)
                obj = 1 / (1 + math.exp(-r[4]))
                e = np.exp(r[5:] - r[5:].max())
                probs = obj * e / e.sum()
                c = int(np.argmax(probs))
                if probs[c] >= thr:
                    out.append((decode_cell(r[:4], (cx, cy), a.priors[k], a.cell_size), probs[c], c))
    return out


@pytest.mark.parametrize("k", [1, 3])
def test_decode_all_matches_loop_oracle(k):
    a = anchors()
    raw = np.random.default_rng(k).normal(0, 2, (a.grid_h, a.grid_w, 3, 5 + k))
    got = decode_all(raw, a, 0.2)
    ref = _loop_decode(raw, a, 0.2)
    assert len(got) == len(ref)
    for d, (box, score, c) in zip(got, ref):
        assert tuple(d.box) == pytest.approx(tuple(box), abs=1e-9)
        assert d.score == pytest.approx(score, abs=1e-12)
        assert d.class_id == c


def test_decode_all_threshold_zero_returns_every_slot():
    a = anchors()
    raw = np.random.default_rng(3).normal(size=(a.grid_h, a.grid_w, 3, 6))
    dets = decode_all(raw, a, 0.0)
    assert len(dets) == a.grid_w * a.grid_h * ANCHORS_PER_CELL
    assert [d.order for d in dets] == list(range(len(dets)))


def test_decode_all_suppressed_objectness_gives_nothing():
    a = anchors()
    raw = np.zeros((a.grid_h, a.grid_w, 3, 6))
    raw[..., 4] = -20
    assert decode_all(raw, a, 0.01) == []


def test_decode_all_single_hot_slot():
    a = anchors()
    raw = np.zeros((a.grid_h, a.grid_w, 3, 6))
    raw[..., 4] = -20
    raw[2, 3, 1] = [0.4, -0.3, 0.2, 0.1, 8.0, 0.0]
    (d,) = decode_all(raw, a, 0.5)
    assert d.box == decode_cell(raw[2, 3, 1, :4], (3, 2), PRIORS[1], 16.0)


def test_decode_all_shape_mismatch():
    with pytest.raises(ShapeError):
        decode_all(np.zeros((3, 3, 3, 6)), anchors(), 0.3)


def test_anchor_set_requires_three_positive_priors():
    with pytest.raises(ValueError):
        AnchorSet(2, 2, 16, ((1, 1), (2, 2)))
    with pytest.raises(ValueError):
        AnchorSet(2, 2, 16, ((1, 1), (2, 2), (0, 3)))


# -- target assignment ---------------------------------------------------------------

def test_gt_equal_to_prior_at_cell_center_has_zero_targets():
    a = anchors()
    tg = assign_targets([Box(2.5 * 16, 1.5 * 16, 24, 24)], a)
    assert tg.foreground() == [(1, 2, 1)]
    np.testing.assert_allclose(tg.t[1, 2, 1], 0, atol=0)


def test_two_gt_in_two_cells():
    a = anchors()
    tg = assign_targets([Box(8, 8, 16, 16), Box(60, 40, 30, 30)], a)
    assert len(tg.foreground()) == 2
    assert int((tg.label == 0).sum()) == a.grid_w * a.grid_h * 3 - 2


def test_center_on_boundary_goes_to_lower_index_cell_edge_rule():
    a = anchors()
    tg = assign_targets([Box(32.0, 16.0, 16, 16)], a)
    # cells are half-open: x = 32 lies in [32, 48), i.e. column 2
    assert tg.foreground()[0][:2] == (1, 2)


def test_gt_outside_grid():
    with pytest.raises(AssignmentError):
        assign_targets([Box(500, 10, 10, 10)], anchors())


@settings(max_examples=100, deadline=None)
@given(st.floats(0.5, 79.5), st.floats(0.5, 63.5), st.floats(4, 60), st.floats(4, 60))
def test_assignment_matches_exhaustive_oracle_and_decodes_back(x, y, w, h):
    a = anchors()
    gt = Box(x, y, w, h)
    tg = assign_targets([gt], a)
    (cy, cx, k), = tg.foreground()
    assert (cx, cy) == (int(x // 16), int(y // 16))
    ious = [iou(gt, Box(x, y, pw, ph)) for pw, ph in PRIORS]
    assert k == int(np.argmax(ious))   # argmax returns the first maximum, as the tie rule asks
    back = decode_cell(tg.t[cy, cx, k], (cx, cy), PRIORS[k], 16.0)
    assert tuple(back) == pytest.approx(tuple(gt), abs=1e-4)


# -- nms ---------------------------------------------------------------------------------

def det(x, y, s, w=10, c=0, order=0):
    return Detection(Box(x, y, w, w), s, c, order)


def test_nms_identical_boxes_keep_higher():
    kept = nms([det(0, 0, 0.8, order=0), det(0, 0, 0.9, order=1)], 0.45)
    assert [d.score for d in kept] == [0.9]


def test_nms_disjoint_all_kept():
    assert len(nms([det(0, 0, 0.5), det(100, 0, 0.6), det(0, 100, 0.7)], 0.45)) == 3


def test_nms_classes_do_not_suppress_each_other():
    assert len(nms([det(0, 0, 0.9, c=0), det(0, 0, 0.8, c=1)], 0.45)) == 2


def test_nms_score_ties_broken_by_decode_order():
    kept = nms([det(0, 0, 0.5, order=7), det(1, 0, 0.5, order=2)], 0.45)
    assert [d.order for d in kept] == [2]


def _quadratic_nms(dets, thr):
    """Reference: repeatedly take the best remaining box, drop its same-class overlaps."""
    rest = sorted(dets, key=lambda d: (-d.score, d.order))
    out = []
    while rest:
        best = rest.pop(0)
        out.append(best)
        rest = [d for d in rest if d.class_id != best.class_id or iou(d.box, best.box) <= thr]
    return out


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_nms_matches_quadratic_reference(seed):
    rng = np.random.default_rng(seed)
    dets = [Detection(Box(*rng.uniform(0, 60, 2), *rng.uniform(5, 30, 2)), float(rng.uniform()),
                      int(rng.integers(0, 2)), i) for i in range(10)]
    ref = _quadratic_nms(dets, 0.45)
    for impl in (nms, nms_fast):
        kept = impl(dets, 0.45)
        assert [d.order for d in kept] == [d.order for d in ref]
        scores = [d.score for d in kept]
        assert scores == sorted(scores, reverse=True)
        for i, p in enumerate(kept):
            for q in kept[i + 1:]:
                assert p.class_id != q.class_id or iou(p.box, q.box) <= 0.45
