import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowtrack.boxes import Box
from flowtrack.config import ConfigError
from flowtrack.synth import (
    Background, Motion, OccluderSpec, Scenario, ScenarioError, TargetSpec, covered_fraction, generate_sequence,
    ground_truth, linear_scenario, load_scenario, occlusion_scenario, scenario_from_dict, static_scenario,
    training_scenario,
)


def test_static_gt_is_constant():
    _, gt = generate_sequence(static_scenario(seed=4, frames=12))
    assert len({(g.box.x, g.box.y, g.box.w, g.box.h) for g in gt}) == 1


def test_linear_gt_closed_form():
    s = Scenario(frames=20, target=TargetSpec(x=40, y=100, motion=Motion("linear", vx=2.0, vy=0.0)))
    gt = ground_truth(s)
    assert [g.box.x for g in gt] == [40 + 2 * t for t in range(20)]
    assert all(g.box.y == 100 for g in gt)


def test_sinusoidal_gt_closed_form():
    s = Scenario(frames=40, target=TargetSpec(motion=Motion("sinusoidal", amp_x=30, amp_y=10, period=20)))
    gt = ground_truth(s)
    for t, g in enumerate(gt):
        assert g.box.x == pytest.approx(160 + 30 * np.sin(2 * np.pi * t / 20), abs=1e-12)
        assert g.box.y == pytest.approx(120 + 10 * np.sin(2 * np.pi * t / 20), abs=1e-12)


def test_piecewise_fast_speed_and_bounds():
    s = Scenario(frames=60, target=TargetSpec(motion=Motion("piecewise_fast", speed=7, segment=5)))
    gt = ground_truth(s)
    xs = np.array([g.box.x for g in gt])
    ys = np.array([g.box.y for g in gt])
    steps = np.hypot(np.diff(xs), np.diff(ys))
    assert steps.max() <= 7 + 1e-9   # reflection can only shorten a step
    assert xs.min() - 12 >= 1 and xs.max() + 12 <= s.width - 1


def _coverage_oracle(box, occ, samples=400):
    """Point-sampling estimate of the covered fraction of ``box``."""
    x0, y0, x1, y1 = box.corners()
    xs = np.linspace(x0, x1, samples, endpoint=False) + (x1 - x0) / samples / 2
    ys = np.linspace(y0, y1, samples, endpoint=False) + (y1 - y0) / samples / 2
    a0, b0, a1, b1 = occ.corners()
    inside_x = (xs >= a0) & (xs < a1)
    inside_y = (ys >= b0) & (ys < b1)
    return inside_x.mean() * inside_y.mean()


def test_occluded_flag_exactly_on_interval():
    s = Scenario(frames=40, target=TargetSpec(x=100, y=100, motion=Motion("linear", vx=1.0)),
                 occluder=OccluderSpec(x=125, y=100, width=60, height=60, start=20, end=30, opacity=1.0))
    gt = ground_truth(s)
    flagged = [k for k, g in enumerate(gt) if g.occluded]
    assert flagged == list(range(20, 31))
    for g in gt[20:31]:
        assert _coverage_oracle(g.box, s.occluder.box) > 0.5


def test_covered_fraction_matches_sampling_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = Box(*rng.uniform(20, 60, 2), *rng.uniform(5, 30, 2))
        o = Box(*rng.uniform(20, 60, 2), *rng.uniform(5, 30, 2))
        assert covered_fraction(b, o) == pytest.approx(_coverage_oracle(b, o), abs=0.01)


def test_occluder_pixels_are_painted():
    s = occlusion_scenario(seed=1)
    frames, gt = generate_sequence(s)
    o = s.occluder
    k = o.start
    assert gt[k].occluded
    cx, cy = int(gt[k].box.x), int(gt[k].box.y)
    assert frames[k][cy, cx] == 70


def test_target_exceeding_frame_rejected():
    with pytest.raises(ScenarioError):
        generate_sequence(Scenario(width=32, height=32, target=TargetSpec(x=16, y=16, width=40, height=10)))
    with pytest.raises(ScenarioError):
        generate_sequence(Scenario(frames=200, target=TargetSpec(x=20, motion=Motion("linear", vx=5))))


def test_occlusion_interval_outside_sequence_rejected():
    with pytest.raises(ScenarioError):
        generate_sequence(Scenario(frames=10, occluder=OccluderSpec(x=10, y=10, width=5, height=5, start=8, end=12)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_generator_is_bit_identical(seed):
    s = training_scenario(seed)
    f1, g1 = generate_sequence(s)
    f2, g2 = generate_sequence(training_scenario(seed))
    assert all(a.tobytes() == b.tobytes() for a, b in zip(f1, f2))
    assert g1 == g2
    assert all(f.dtype == np.uint8 and f.shape == (s.height, s.width) for f in f1)


@pytest.mark.parametrize("family", [static_scenario, linear_scenario, occlusion_scenario])
def test_families_keep_target_inside(family):
    for seed in range(10):
        s = family(seed=seed)
        for g in ground_truth(s):
            x0, y0, x1, y1 = g.box.corners()
            assert x0 >= 1 and y0 >= 1 and x1 <= s.width - 1 and y1 <= s.height - 1


def test_occlusion_family_has_full_occlusion():
    for seed in range(10):
        s = occlusion_scenario(seed=seed)
        gt = ground_truth(s)
        assert all(gt[k].occluded for k in range(s.occluder.start, s.occluder.end + 1))
        assert not any(g.occluded for k, g in enumerate(gt) if not s.occluder.active(k))


def test_scenario_json_round_trip(tmp_path):
    s = occlusion_scenario(seed=3)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(s.to_dict()))
    back = load_scenario(p)
    assert back == s
    f1, _ = generate_sequence(s)
    f2, _ = generate_sequence(back)
    assert f1[50].tobytes() == f2[50].tobytes()


def test_scenario_unknown_key_and_bad_enum():
    with pytest.raises(ConfigError) as e:
        scenario_from_dict({"name": "x", "colour": 3})
    assert e.value.key == "colour"
    with pytest.raises(ConfigError):
        scenario_from_dict({"background": {"type": "plaid"}})
    with pytest.raises(ConfigError):
        Background(type="plaid")
