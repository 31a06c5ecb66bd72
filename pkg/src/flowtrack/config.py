"""Run configuration: every tunable with its default, strict JSON parsing and
a stable config hash."""
import dataclasses
import hashlib
import json
import math
import typing
from dataclasses import dataclass, field

from .boxes import EncodingConvention
from .flow import FlowParams
from .losses import LossConfig


class ConfigError(ValueError):
    """Raised for malformed config/scenario documents; ``key`` names the culprit."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


def default_detector_layers():
    return [
        {"type": "conv", "kernel": 3, "in_channels": 1, "out_channels": 8, "stride": 2, "padding": 1,
         "activation": "leaky_relu"},
        {"type": "conv", "kernel": 3, "in_channels": 8, "out_channels": 16, "stride": 1, "padding": 1,
         "activation": "leaky_relu"},
        {"type": "pool", "window": 2, "stride": 2},
        {"type": "conv", "kernel": 3, "in_channels": 16, "out_channels": 32, "stride": 2, "padding": 1,
         "activation": "leaky_relu"},
        {"type": "conv", "kernel": 3, "in_channels": 32, "out_channels": 32, "stride": 2, "padding": 1,
         "activation": "leaky_relu"},
        # a 3x3 head widens the receptive field to 65 px, so each cell sees the whole target
        {"type": "conv", "kernel": 3, "in_channels": 32, "out_channels": 18, "stride": 1, "padding": 1,
         "activation": "identity"},
    ]


def default_offset_layers():
    return [
        {"type": "dense", "in_dim": 68, "out_dim": 16, "activation": "leaky_relu"},
        {"type": "dense", "in_dim": 16, "out_dim": 4, "activation": "identity"},
    ]


@dataclass
class DetectorConfig:
    layers: list = field(default_factory=default_detector_layers)
    offset_layers: list = field(default_factory=default_offset_layers)
    priors: list = field(default_factory=lambda: [[16.0, 16.0], [24.0, 24.0], [36.0, 36.0]])
    cell_size: int = 16
    num_classes: int = 1
    score_threshold: float = 0.3
    nms_iou: float = 0.45


@dataclass
class TrackerConfig:
    iou_match_threshold: float = 0.3
    template_update_rate: float = 0.1
    flow_blend: float = 0.7
    confirm_hits: int = 2
    occlude_after_misses: int = 1
    lost_after_misses: int = 10
    appearance_gate: float = 0.5
    velocity_decay: float = 0.5
    flow_velocity_gate: float = 8.0     # px; flow offsets further than this from the velocity are distrusted
    spawn_overlap_iou: float = 0.3      # unmatched detections this close to a live track do not spawn a new one
    duplicate_iou: float = 0.3          # of two live tracks overlapping this much, the younger is dropped

    def __post_init__(self):
        for name in ("iou_match_threshold", "template_update_rate", "flow_blend", "velocity_decay",
                     "spawn_overlap_iou", "duplicate_iou"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]", key=name)
        if not -1.0 <= self.appearance_gate <= 1.0:
            raise ConfigError("appearance_gate must lie in [-1, 1]", key="appearance_gate")
        if self.flow_velocity_gate < 0:
            raise ConfigError("flow_velocity_gate must be ≥ 0", key="flow_velocity_gate")
        if self.confirm_hits < 1 or self.occlude_after_misses < 1 or self.lost_after_misses < self.occlude_after_misses:
            raise ConfigError("need confirm_hits ≥ 1 and 1 ≤ occlude_after_misses ≤ lost_after_misses",
                              key="lost_after_misses")


@dataclass
class TrainConfig:
    iterations: int = 300
    learning_rate: float = 0.02
    lr_schedule: str = "cosine"        # "cosine" (decay to 0 at the last iteration) or "constant"
    warmup_iterations: int = 0         # linear ramp from lr/warmup up to lr
    clip_grad_norm: float = 3.0        # global L2 clip over both heads; 0 disables
    momentum: float = 0.0
    frames_per_batch: int = 0          # 0 → every training frame each iteration
    negatives_per_positive: int = 3
    frame_gap: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError("lr_schedule must be 'cosine' or 'constant'", key="lr_schedule")
        if self.iterations < 0 or self.warmup_iterations < 0 or self.learning_rate < 0 or self.clip_grad_norm < 0:
            raise ConfigError("need iterations ≥ 0, warmup_iterations ≥ 0, learning_rate ≥ 0, clip_grad_norm ≥ 0", key="learning_rate")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)", key="momentum")

    def lr_at(self, iteration):
        if iteration < self.warmup_iterations:
            return self.learning_rate * (iteration + 1) / self.warmup_iterations
        if self.lr_schedule == "constant":
            return self.learning_rate
        span = max(1, self.iterations - self.warmup_iterations)
        return 0.5 * self.learning_rate * (1.0 + math.cos(math.pi * (iteration - self.warmup_iterations) / span))


@dataclass
class Config:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    flow: FlowParams = field(default_factory=FlowParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    convention: str = EncodingConvention.RCNN_STANDARD.value
    seed: int = 0

    def __post_init__(self):
        try:
            self.convention = EncodingConvention.parse(self.convention).value
        except ValueError as e:
            raise ConfigError(str(e), key="convention") from None

    def to_dict(self):
        return dataclasses.asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self):
        """Stable 64-bit hash (16 hex digits) of the canonical serialization."""
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean", key=path)
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer", key=path)
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number", key=path)
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string", key=path)
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list", key=path)
        return value
    return value


def from_dict(cls, data, path=""):
    """Build dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object", key=path or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        key = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown key {key!r}", key=key)
    kwargs = {}
    for name in names:
        if name in data:
            sub = f"{path}.{name}" if path else name
            kwargs[name] = _coerce(data[name], hints[name], sub)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path or cls.__name__}: {e}", key=path or None) from None


def load_config(path=None, overrides=None):
    data = {}
    if path is not None:
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: invalid JSON ({e})") from None
    cfg = from_dict(Config, data)
    for key, value in (overrides or {}).items():
        if value is not None:
            setattr(cfg, key, value)
    cfg.__post_init__()
    return cfg
