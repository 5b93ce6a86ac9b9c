"""Experiment configuration: nested dataclasses loaded from YAML or JSON."""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import InvalidConfigError
from .simworld import STYLES


@dataclass
class WorldConfig:
    canvas_size: tuple = (64, 1024)
    frame_size: tuple = (48, 64)
    n_subgoals: int = 5
    frames_per_segment: int = 32
    objects_per_capture: int = 24
    plant_scale_range: tuple = (0.55, 0.8)
    group_instances_per_class: int = 3
    jitter: int = 0
    brightness: float = 0.0


@dataclass
class PriorConfig:
    generic_instances_per_class: int = 3
    cluttered_fraction: float = 0.5


@dataclass
class CompositorConfig:
    n_samples: int = 256
    objects_per_image: tuple = (1, 3)
    scale_range: tuple = (0.4, 0.8)
    mix_ratio: float = 0.5
    alpha_threshold: float = 0.5


@dataclass
class FilterConfig:
    enabled: bool = True
    per_class: int = 64
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 32
    decision_threshold: float = 0.5
    min_positives: int = 8


@dataclass
class DetectorConfig:
    scale: str = "tiny"
    max_disp: int = 2
    iterations: int = 3000
    retrain_iterations: int = None
    lr: float = 1e-4
    batch: int = 8
    optimizer: str = "adam"
    threshold: float = 0.5
    min_area: int = 1
    pos_weight_max: float = 100.0
    train_shift: int = 0

    @property
    def retrain_iters(self):
        if self.retrain_iterations is None:
            return self.iterations // 4
        return self.retrain_iterations


@dataclass
class ExperimentConfig:
    seed: int = 0
    out: str = "runs/default"
    generations: int = 2
    styles: tuple = STYLES
    assignments: tuple = (("group1", "group2"), ("group2", "group1"))
    methods: tuple = ("supervised", "generic", "proposed", "proposed_nofilter")
    world: WorldConfig = field(default_factory=WorldConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)
    compositor: CompositorConfig = field(default_factory=CompositorConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)

    def validate(self):
        if self.generations < 1:
            raise InvalidConfigError("generations must be >= 1")
        for s in self.styles:
            if s not in STYLES:
                raise InvalidConfigError(f"unknown style {s!r}")
        fh, fw = self.world.frame_size
        ch, cw = self.world.canvas_size
        if fh > ch or fw > cw:
            raise InvalidConfigError("frame_size exceeds canvas_size")
        if not 0 <= self.compositor.mix_ratio <= 1:
            raise InvalidConfigError("compositor.mix_ratio must lie in [0, 1]")
        if self.detector.iterations < 0 or self.detector.retrain_iters < 0:
            raise InvalidConfigError("iterations must be >= 0")
        if self.detector.min_area < 1:
            raise InvalidConfigError("detector.min_area must be >= 1")
        for a, b in self.assignments:
            if a == b:
                raise InvalidConfigError("train and test groups must differ")
        known = {"supervised", "generic", "proposed", "proposed_nofilter"}
        if not set(self.methods) <= known:
            raise InvalidConfigError(f"unknown methods {set(self.methods) - known}")
        return self

    def to_dict(self):
        return _plain(dataclasses.asdict(self))

    def hash(self):
        d = self.to_dict()
        d.pop("out", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path=""):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise InvalidConfigError(f"section {path or '<root>'} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise InvalidConfigError(f"unknown config key {path + key!r}")
        default = names[key].default_factory() if names[key].default_factory is not dataclasses.MISSING \
            else names[key].default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}{key}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[key] = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidConfigError(str(exc)) from exc


def from_dict(data):
    return _build(ExperimentConfig, data).validate()


def set_path(data, dotted, value):
    """Set ``a.b.c`` in a nested dict, parsing ``value`` as YAML."""
    keys = dotted.split(".")
    cur = data
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
    return data


def load_config(path=None, overrides=()):
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise InvalidConfigError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise InvalidConfigError(f"cannot parse {path}: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise InvalidConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        set_path(data, k.strip(), v.strip())
    return from_dict(data)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
