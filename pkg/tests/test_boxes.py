import math
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from flowtrack.boxes import (
    Box, DegenerateAnchorError, Delta, EncodingConvention, decode_delta, encode_delta, encode_target,
    iou, iou_matrix,
)

PL, RC = EncodingConvention.PAPER_LITERAL, EncodingConvention.RCNN_STANDARD

coord = st.floats(-500, 500, allow_nan=False)
size = st.floats(0.5, 300, allow_nan=False)
boxes = st.builds(Box, coord, coord, size, size)


def exact_iou(a, b):
    """Rational-arithmetic IoU from corner intervals (boxes with integer corners)."""
    ax0, ay0, ax1, ay1 = (Fraction(v) for v in a)
    bx0, by0, bx1, by1 = (Fraction(v) for v in b)
    iw = max(Fraction(0), min(ax1, bx1) - max(ax0, bx0))
    ih = max(Fraction(0), min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def test_iou_identical_and_disjoint():
    a = Box(3, 4, 5, 6)
    assert iou(a, a) == 1.0
    assert iou(a, Box(100, 100, 5, 6)) == 0.0


def test_iou_half_offset_unit_squares():
    assert iou(Box(0, 0, 1, 1), Box(0.5, 0, 1, 1)) == pytest.approx(1 / 3)


def test_iou_touching_edges_is_zero():
    assert iou(Box(0, 0, 2, 2), Box(2, 0, 2, 2)) == 0.0


@given(st.lists(st.integers(-20, 20), min_size=8, max_size=8))
def test_iou_matches_exact_rational_oracle(v):
    x0, x1 = sorted(v[0:2])
    y0, y1 = sorted(v[2:4])
    u0, u1 = sorted(v[4:6])
    w0, w1 = sorted(v[6:8])
    assume(x1 > x0 and y1 > y0 and u1 > u0 and w1 > w0)
    a, b = Box.from_corners(x0, y0, x1, y1), Box.from_corners(u0, w0, u1, w1)
    assert iou(a, b) == pytest.approx(float(exact_iou((x0, y0, x1, y1), (u0, w0, u1, w1))), abs=1e-12)


@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


@given(boxes)
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0)


@given(boxes, boxes, st.floats(0.1, 10))
def test_iou_scale_invariant(a, b, s):
    scaled = [Box(q.x * s, q.y * s, q.w * s, q.h * s) for q in (a, b)]
    assert iou(*scaled) == pytest.approx(iou(a, b), abs=1e-9)


@given(st.lists(boxes, min_size=1, max_size=6), st.lists(boxes, min_size=1, max_size=6))
def test_iou_matrix_agrees_with_scalar(aa, bb):
    m = iou_matrix(aa, bb)
    assert m.shape == (len(aa), len(bb))
    for i, a in enumerate(aa):
        for j, b in enumerate(bb):
            assert m[i, j] == pytest.approx(iou(a, b), abs=1e-12)


def test_iou_matrix_empty():
    assert iou_matrix([], [Box(0, 0, 1, 1)]).shape == (0, 1)


# -- encoding ------------------------------------------------------------------

@pytest.mark.parametrize("conv", [PL, RC])
def test_encode_identity_is_zero(conv):
    a = Box(10, 12, 4, 6)
    assert tuple(encode_delta(a, a, conv)) == (0, 0, 0, 0)
    assert tuple(encode_target(a, a, conv)) == (0, 0, 0, 0)


def test_paper_literal_hand_example():
    d = encode_delta(Box(12, 10, 8, 4), Box(10, 10, 4, 4), PL)
    assert tuple(d) == pytest.approx((0.2, 0, math.log(2), 0))


def test_rcnn_hand_example():
    d = encode_delta(Box(12, 10, 8, 4), Box(10, 10, 4, 4), RC)
    assert tuple(d) == pytest.approx((0.5, 0, math.log(2), 0))


def test_target_hand_example():
    d = encode_target(Box(10, 5, 2, 4), Box(5, 5, 2, 2), PL)
    assert tuple(d) == pytest.approx((1, 0, 0, math.log(2)))


def test_decode_hand_example_and_zero():
    a = Box(10, 10, 4, 4)
    assert decode_delta(Delta(0.2, 0, math.log(2), 0), a, PL) == pytest.approx(Box(12, 10, 8, 4))
    assert decode_delta(Delta(0, 0, 0, 0), a, RC) == a


def test_paper_literal_degenerate_anchor():
    with pytest.raises(DegenerateAnchorError):
        encode_delta(Box(1, 1, 1, 1), Box(0, 5, 2, 2), PL)
    with pytest.raises(DegenerateAnchorError):
        encode_delta(Box(1, 1, 1, 1), Box(5, 0, 2, 2), PL)
    # the same anchor is fine for the size-normalized convention
    encode_delta(Box(1, 1, 1, 1), Box(0, 0, 2, 2), RC)


def test_non_positive_anchor_size():
    with pytest.raises(DegenerateAnchorError):
        encode_delta(Box(1, 1, 1, 1), Box(5, 5, 0, 2), RC)


def test_convention_parse_accepts_cli_spelling():
    assert EncodingConvention.parse("paper-literal") is PL
    assert EncodingConvention.parse("rcnn_standard") is RC
    with pytest.raises(ValueError):
        EncodingConvention.parse("yolo")


def test_round_trip_thousand_pairs_both_conventions():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for conv in (PL, RC):
        for _ in range(1000):
            a = Box(*rng.uniform(1, 320, 2), *rng.uniform(2, 100, 2))
            p = Box(*rng.uniform(-50, 400, 2), *rng.uniform(1, 150, 2))
            back = decode_delta(encode_delta(p, a, conv), a, conv)
            for u, v in zip(back, p):
                worst = max(worst, abs(u - v) / max(abs(v), 1e-300))
    assert worst <= 1e-9
    assert time.perf_counter() - t0 < 1.0


@given(boxes, boxes, st.floats(-100, 100))
def test_rcnn_translation_covariance(p, a, t):
    d0 = encode_delta(p, a, RC)
    d1 = encode_delta(Box(p.x + t, p.y + t, p.w, p.h), Box(a.x + t, a.y + t, a.w, a.h), RC)
    assert d1.dx == pytest.approx(d0.dx, abs=1e-6)
    assert d1.dy == pytest.approx(d0.dy, abs=1e-6)


@given(boxes, boxes, st.floats(0.1, 10))
def test_rcnn_scale_invariance(p, a, s):
    d0 = encode_delta(p, a, RC)
    d1 = encode_delta(Box(p.x * s, p.y * s, p.w * s, p.h * s), Box(a.x * s, a.y * s, a.w * s, a.h * s), RC)
    assert tuple(d1) == pytest.approx(tuple(d0), abs=1e-6)


@settings(max_examples=200)
@given(boxes, boxes)
def test_target_equals_delta(b, a):
    for conv in (PL, RC):
        if conv is PL and (a.x == 0 or a.y == 0):
            continue
        assert encode_target(b, a, conv) == encode_delta(b, a, conv)


def test_box_corner_round_trip():
    b = Box(3.5, -2.0, 7.0, 1.5)
    assert Box.from_corners(*b.corners()) == b
    assert b.area == pytest.approx(10.5)
    assert b.is_valid()
    assert not Box(0, 0, -1, 1).is_valid()
