"""Deterministic synthetic tracking sequences with closed-form ground truth.

A scenario renders one textured bright target over a background (flat,
per-frame noise, or dark moving clutter), optionally covered by a flat
occluder during a frame interval, with an optional global gain ramp.
"""
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .boxes import Box
from .config import ConfigError, from_dict

MOTION_TYPES = ("static", "linear", "sinusoidal", "piecewise_fast")
BACKGROUND_TYPES = ("flat", "noise", "moving_clutter")
OCCLUDED_FRACTION = 0.5


class ScenarioError(ValueError):
    pass


@dataclass
class Motion:
    type: str = "static"
    vx: float = 0.0
    vy: float = 0.0
    amp_x: float = 0.0
    amp_y: float = 0.0
    period: float = 40.0
    speed: float = 6.0
    segment: int = 8

    def __post_init__(self):
        if self.type not in MOTION_TYPES:
            raise ConfigError(f"motion.type must be one of {MOTION_TYPES}", key="target.motion.type")
        if self.period <= 0 or self.segment < 1:
            raise ConfigError("motion period and segment must be positive", key="target.motion")


@dataclass
class TargetSpec:
    x: float = 160.0
    y: float = 120.0
    width: float = 24.0
    height: float = 24.0
    texture_seed: int = 0
    motion: Motion = field(default_factory=Motion)


@dataclass
class OccluderSpec:
    x: float = 0.0
    y: float = 0.0
    width: float = 0.0
    height: float = 0.0
    start: int = 0
    end: int = 0
    opacity: float = 1.0
    level: float = 70.0

    @property
    def box(self):
        return Box(self.x, self.y, self.width, self.height)

    def active(self, k):
        return self.start <= k <= self.end


@dataclass
class Background:
    type: str = "flat"
    level: float = 96.0
    sigma: float = 0.0
    count: int = 0

    def __post_init__(self):
        if self.type not in BACKGROUND_TYPES:
            raise ConfigError(f"background.type must be one of {BACKGROUND_TYPES}", key="background.type")


@dataclass
class Illumination:
    gain_per_frame: float = 0.0


@dataclass
class Scenario:
    name: str = "scenario"
    width: int = 320
    height: int = 240
    frames: int = 100
    seed: int = 0
    target: TargetSpec = field(default_factory=TargetSpec)
    occluder: OccluderSpec = None
    background: Background = field(default_factory=Background)
    illumination: Illumination = field(default_factory=Illumination)

    def to_dict(self):
        return asdict(self)


@dataclass
class GroundTruth:
    box: Box
    occluded: bool


def scenario_from_dict(data):
    data = dict(data)
    occ = data.pop("occluder", None)
    s = from_dict(Scenario, data)
    if occ is not None:
        s.occluder = from_dict(OccluderSpec, occ, "occluder")
    return s


def load_scenario(path):
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return scenario_from_dict(data)


def _rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def target_centers(s):
    """Closed-form (x, y) center of the target for every frame."""
    t = np.arange(s.frames, dtype=np.float64)
    m = s.target.motion
    x0, y0 = s.target.x, s.target.y
    if m.type == "static":
        return np.full_like(t, x0), np.full_like(t, y0)
    if m.type == "linear":
        return x0 + m.vx * t, y0 + m.vy * t
    if m.type == "sinusoidal":
        ph = np.sin(2 * np.pi * t / m.period)
        return x0 + m.amp_x * ph, y0 + m.amp_y * ph
    # piecewise_fast: fresh heading every `segment` frames, reflected at the frame walls
    hw, hh = s.target.width / 2 + 1, s.target.height / 2 + 1
    headings = _rng(s.seed, 1).uniform(0, 2 * np.pi, size=s.frames // m.segment + 1)
    xs, ys = [x0], [y0]
    x, y = x0, y0
    for k in range(1, s.frames):
        a = headings[(k - 1) // m.segment]
        x = _reflect(x + m.speed * math.cos(a), hw, s.width - hw)
        y = _reflect(y + m.speed * math.sin(a), hh, s.height - hh)
        xs.append(x)
        ys.append(y)
    return np.array(xs), np.array(ys)


def _reflect(v, lo, hi):
    if hi <= lo:
        return lo
    span = hi - lo
    r = (v - lo) % (2 * span)
    return lo + (r if r <= span else 2 * span - r)


def _texture(rng, h, w, lo, hi, cell=4):
    coarse = rng.integers(lo, hi, size=(h // cell + 1, w // cell + 1)).astype(np.float64)
    return np.kron(coarse, np.ones((cell, cell)))[:h, :w]


def _paste(frame, patch, cx, cy):
    """Paste a patch centered at (cx, cy), top-left rounded to the pixel grid."""
    ph, pw = patch.shape
    x0 = int(math.floor(cx - pw / 2 + 0.5))
    y0 = int(math.floor(cy - ph / 2 + 0.5))
    fx0, fy0 = max(0, x0), max(0, y0)
    fx1, fy1 = min(frame.shape[1], x0 + pw), min(frame.shape[0], y0 + ph)
    if fx0 < fx1 and fy0 < fy1:
        frame[fy0:fy1, fx0:fx1] = patch[fy0 - y0:fy1 - y0, fx0 - x0:fx1 - x0]


def covered_fraction(box, cover):
    x0, y0, x1, y1 = box.corners()
    a0, b0, a1, b1 = cover.corners()
    iw = max(0.0, min(x1, a1) - max(x0, a0))
    ih = max(0.0, min(y1, b1) - max(y0, b0))
    return iw * ih / box.area


def _validate(s):
    if s.width < 8 or s.height < 8 or s.frames < 1:
        raise ScenarioError("frames must be at least 8x8 and the sequence non-empty")
    tw, th = s.target.width, s.target.height
    if tw <= 0 or th <= 0 or tw > s.width - 2 or th > s.height - 2:
        raise ScenarioError(f"target {tw}x{th} does not fit inside a {s.width}x{s.height} frame")
    if s.occluder is not None:
        o = s.occluder
        if not 0 <= o.start <= o.end < s.frames:
            raise ScenarioError(f"occlusion interval [{o.start}, {o.end}] outside the sequence")
        if o.width <= 0 or o.height <= 0 or not 0 <= o.opacity <= 1:
            raise ScenarioError("occluder needs positive size and opacity in [0, 1]")
    xs, ys = target_centers(s)
    if (np.min(xs - tw / 2) < 1 or np.max(xs + tw / 2) > s.width - 1
            or np.min(ys - th / 2) < 1 or np.max(ys + th / 2) > s.height - 1):
        raise ScenarioError("target leaves the frame (must stay ≥ 1 px inside)")
    return xs, ys


def ground_truth(s):
    xs, ys = _validate(s)
    out = []
    for k in range(s.frames):
        box = Box(float(xs[k]), float(ys[k]), float(s.target.width), float(s.target.height))
        occ = False
        o = s.occluder
        if o is not None and o.active(k) and o.opacity >= 0.5:
            occ = covered_fraction(box, o.box) > OCCLUDED_FRACTION
        out.append(GroundTruth(box, occ))
    return out


def _clutter(s):
    rng = _rng(s.seed, 2)
    items = []
    for _ in range(s.background.count):
        size = rng.uniform(12, 40, size=2)
        items.append({
            "patch": _texture(rng, int(size[1]), int(size[0]), 10, 80),
            "x": rng.uniform(0, s.width), "y": rng.uniform(0, s.height),
            "vx": rng.uniform(-3, 3), "vy": rng.uniform(-3, 3),
        })
    return items


def generate_sequence(s):
    """Render frames (uint8, H x W) and per-frame ground truth."""
    gt = ground_truth(s)
    tex_rng = _rng(s.target.texture_seed, 3)
    patch = _texture(tex_rng, int(round(s.target.height)), int(round(s.target.width)), 150, 256)
    noise_rng = _rng(s.seed, 4)
    clutter = _clutter(s)
    bg = s.background
    frames = []
    for k in range(s.frames):
        f = np.full((s.height, s.width), bg.level, dtype=np.float64)
        if bg.sigma > 0:
            f += noise_rng.normal(0.0, bg.sigma, size=f.shape)
        for c in clutter:
            cx = _reflect(c["x"] + c["vx"] * k, 0, s.width)
            cy = _reflect(c["y"] + c["vy"] * k, 0, s.height)
            _paste(f, c["patch"], cx, cy)
        _paste(f, patch, gt[k].box.x, gt[k].box.y)
        o = s.occluder
        if o is not None and o.active(k):
            x0, y0, x1, y1 = o.box.corners()
            c0, c1 = max(0, int(math.floor(x0 + 0.5))), min(s.width, int(math.floor(x1 + 0.5)))
            r0, r1 = max(0, int(math.floor(y0 + 0.5))), min(s.height, int(math.floor(y1 + 0.5)))
            f[r0:r1, c0:c1] = (1 - o.opacity) * f[r0:r1, c0:c1] + o.opacity * o.level
        if s.illumination.gain_per_frame:
            f *= 1.0 + s.illumination.gain_per_frame * k
        frames.append(np.clip(np.rint(f), 0, 255).astype(np.uint8))
    return frames, gt


# -- scenario families used by tests, training and the benchmark -------------

def static_scenario(seed=0, width=320, height=240, frames=50, size=24, sigma=0.0):
    rng = _rng(seed, 10)
    return Scenario(
        name=f"static_{seed}", width=width, height=height, frames=frames, seed=seed,
        target=TargetSpec(x=float(rng.integers(60, width - 60)), y=float(rng.integers(50, height - 50)),
                          width=size, height=size, texture_seed=seed, motion=Motion("static")),
        background=Background("noise" if sigma else "flat", sigma=sigma),
    )


def linear_scenario(seed=0, width=320, height=240, frames=100, sigma=4.0):
    """Easy suite: constant velocity across the frame, mild noise, no occluder."""
    rng = _rng(seed, 11)
    size = float(rng.integers(20, 33))
    vx = float(rng.choice([-1, 1]) * rng.uniform(1.0, 2.2))
    vy = float(rng.uniform(-0.3, 0.3))
    x0 = 40.0 if vx > 0 else width - 40.0
    y0 = float(rng.uniform(height / 2 - 30, height / 2 + 30))
    return Scenario(
        name=f"linear_{seed}", width=width, height=height, frames=frames, seed=seed,
        target=TargetSpec(x=x0, y=y0, width=size, height=size, texture_seed=seed,
                          motion=Motion("linear", vx=vx, vy=vy)),
        background=Background("noise", sigma=sigma),
    )


def occlusion_scenario(seed=0, width=320, height=240, frames=100, sigma=6.0, clutter=2):
    """Fast diagonal target fully hidden by a flat occluder for several frames."""
    rng = _rng(seed, 12)
    size = float(rng.integers(22, 31))
    vx = float(rng.uniform(2.4, 2.7)) * float(rng.choice([-1, 1]))
    vy = float(rng.uniform(1.2, 1.6)) * float(rng.choice([-1, 1]))
    x0 = 24.0 if vx > 0 else width - 24.0
    y0 = 24.0 if vy > 0 else height - 24.0
    start = int(rng.integers(35, 50))
    duration = int(rng.integers(7, 10))
    end = start + duration - 1
    # the occluder spans the whole path travelled during the interval
    xa, xb = x0 + vx * start, x0 + vx * end
    ya, yb = y0 + vy * start, y0 + vy * end
    occ = OccluderSpec(
        x=(xa + xb) / 2, y=(ya + yb) / 2,
        width=abs(xb - xa) + size + 12, height=abs(yb - ya) + size + 12,
        start=start, end=end, opacity=1.0, level=70.0,
    )
    return Scenario(
        name=f"occlusion_{seed}", width=width, height=height, frames=frames, seed=seed,
        target=TargetSpec(x=x0, y=y0, width=size, height=size, texture_seed=seed,
                          motion=Motion("linear", vx=vx, vy=vy)),
        occluder=occ,
        background=Background("moving_clutter" if clutter else "noise", sigma=sigma, count=clutter),
    )


def training_scenario(seed=0, width=128, height=128, frames=12):
    """Varied short clips for detector training."""
    rng = _rng(seed, 13)
    size = float(rng.integers(14, 41))
    half = size / 2 + 2
    kind = ["flat", "noise", "moving_clutter"][int(rng.integers(0, 3))]
    vx, vy = rng.uniform(-4, 4, size=2)
    x0 = float(rng.uniform(half, width - half))
    y0 = float(rng.uniform(half, height - half))
    # keep the path inside the frame
    xe, ye = x0 + vx * (frames - 1), y0 + vy * (frames - 1)
    if not half <= xe <= width - half:
        vx = -vx
    if not half <= ye <= height - half:
        vy = -vy
    occ = None
    if rng.uniform() < 0.3:
        k = int(rng.integers(0, frames))
        occ = OccluderSpec(x=x0 + vx * k + rng.uniform(-size, size) * 0.6, y=y0 + vy * k,
                           width=size * rng.uniform(0.4, 0.8), height=size * 1.5,
                           start=k, end=min(frames - 1, k + 2), opacity=1.0, level=70.0)
    s = Scenario(
        name=f"train_{seed}", width=width, height=height, frames=frames, seed=seed,
        target=TargetSpec(x=x0, y=y0, width=size, height=size, texture_seed=seed + 1000,
                          motion=Motion("linear", vx=float(vx), vy=float(vy))),
        occluder=occ,
        background=Background(kind, level=float(rng.uniform(70, 120)), sigma=float(rng.uniform(0, 8)),
                              count=int(rng.integers(1, 4)) if kind == "moving_clutter" else 0),
        illumination=Illumination(float(rng.uniform(-0.01, 0.01))),
    )
    try:
        _validate(s)
    except ScenarioError:
        s.target.motion = Motion("static")
        s.target.x = min(max(s.target.x, half), width - half)
        s.target.y = min(max(s.target.y, half), height - half)
    return s


def easy_scenario(seed=0, width=96, height=96, frames=10):
    """Flat background, fixed-size target, slow drift: the convergence set."""
    rng = _rng(seed, 14)
    x0, y0 = rng.uniform(30, width - 30, size=2)
    vx, vy = rng.uniform(-1.5, 1.5, size=2)
    return Scenario(
        name=f"easy_{seed}", width=width, height=height, frames=frames, seed=seed,
        target=TargetSpec(x=float(x0), y=float(y0), width=24, height=24, texture_seed=seed,
                          motion=Motion("linear", vx=float(vx), vy=float(vy))),
        background=Background("flat"),
    )
