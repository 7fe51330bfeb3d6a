"""Run configuration: one YAML document, every field optional, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

import yaml

from gatedssd.backbone import BackboneConfig, StageSpec
from gatedssd.detector import DetectionParams, PriorBoxSpec
from gatedssd.errors import ConfigError
from gatedssd.losses import LossConfig
from gatedssd.model import GateConfig, ModelConfig, PreprocessConfig
from gatedssd.trainer import SceneSpec, TrainConfig


@dataclass
class DetectionSection(DetectionParams):
    num_classes: int = 2
    extra_channels: int = 64


@dataclass
class BenchConfig:
    frames_per_camera: int = 50
    repetitions: int = 10
    oracle_gate: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.frames_per_camera < 1 or self.repetitions < 1:
            raise ValueError("frames_per_camera and repetitions must be >= 1")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    priors: PriorBoxSpec = field(default_factory=PriorBoxSpec)
    detection: DetectionSection = field(default_factory=DetectionSection)
    gate: GateConfig = field(default_factory=GateConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    model_seed: int = 0

    def model_config(self) -> ModelConfig:
        det = self.detection
        return ModelConfig(
            backbone=self.backbone,
            priors=self.priors,
            detection=DetectionParams(det.score_threshold, det.nms_iou_threshold, det.top_k),
            gate=self.gate,
            preprocess=self.preprocess,
            num_classes=det.num_classes,
            extra_channels=det.extra_channels,
        )


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _key_lines(text: str) -> dict[tuple, int]:
    """Map key paths, e.g. ('train', 'epochs'), to 1-based source lines."""
    lines: dict[tuple, int] = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = (*path, str(k.value))
                lines[key] = k.start_mark.line + 1
                walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                lines[(*path, i)] = item.start_mark.line + 1
                walk(item, (*path, i))

    walk(yaml.compose(text), ())
    return lines


def _check_type(value, default, key, line):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", key, line)


def _build(cls, data, path, lines):
    name = ".".join(map(str, path))
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", name, lines.get(path))
    defaults = cls()
    known = {f.name for f in fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        kpath = (*path, str(key))
        kname = ".".join(map(str, kpath))
        line = lines.get(kpath)
        if key not in known:
            raise ConfigError(f"unknown key (allowed: {', '.join(sorted(known))})", kname, line)
        default = getattr(defaults, key)
        if value is not None and default is not None:
            _check_type(value, default, kname, line)
        if cls is BackboneConfig and key == "stages":
            stages = []
            for i, st in enumerate(value):
                spath = (*kpath, i)
                if not isinstance(st, dict):
                    raise ConfigError("each stage must be a mapping", kname, lines.get(spath))
                try:
                    stages.append(StageSpec(**st))
                except (TypeError, ValueError) as exc:
                    raise ConfigError(str(exc), f"{kname}[{i}]", lines.get(spath)) from None
            value = stages
        elif isinstance(default, float) and isinstance(value, int):
            value = float(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), name, lines.get(path)) from None


def parse_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text) if text.strip() else {}
        lines = _key_lines(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=mark.line + 1 if mark else None) from None
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", line=1)
    kwargs = {}
    for key, value in data.items():
        line = lines.get((str(key),))
        if key not in _SECTIONS:
            raise ConfigError(f"unknown section (allowed: {', '.join(sorted(_SECTIONS))})", str(key), line)
        if key == "model_seed":
            _check_type(value, 0, key, line)
            kwargs[key] = value
            continue
        kwargs[key] = _build(_SECTIONS[key].default_factory().__class__, value or {}, (key,), lines)
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def to_dict(config: RunConfig) -> dict:
    def clean(v):
        if isinstance(v, tuple):
            return [clean(x) for x in v]
        if isinstance(v, list):
            return [clean(x) for x in v]
        if isinstance(v, dict):
            return {k: clean(x) for k, x in v.items()}
        return v

    return clean(dataclasses.asdict(config))


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(to_dict(config), sort_keys=False)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]
