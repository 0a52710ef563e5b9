"""Flat key=value run configuration with strict validation."""
from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ParseError


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"

    # data
    data_mode: str = "synth"          # synth | dota
    data_path: str = ""
    image_size: int = 64
    channels: int = 1
    num_classes: int = 3
    class_names: str = "solid,striped,dotted"
    train_scenes: int = 16
    val_scenes: int = 0
    synth_count_min: int = 1
    synth_count_max: int = 2
    synth_size_min: float = 12.0
    synth_size_max: float = 28.0
    synth_aspect_min: float = 1.0
    synth_aspect_max: float = 2.5

    # model
    feat_channels: int = 24
    head_channels: int = 24
    head_mode: str = "deform"         # deform | plain
    level_split: float = 24.0

    # assignment
    assigner: str = "dynamic"         # dynamic | static
    T: float = 0.3
    theta: float = 0.3
    gamma: float = 2.0
    gauss_floor: float = 1e-3

    # optimization
    iterations: int = 2000
    batch_size: int = 2
    lr_start: float = 5e-4
    lr_end: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float = 5.0

    # inference and evaluation
    nms_iou: float = 0.4
    conf_thresh: float = 0.05
    conf_prefilter: float = 0.05
    eval_every: int = 0
    map_mode: str = "allpoint"        # allpoint | voc07

    def validate(self) -> None:
        checks = [
            (self.data_mode in ("synth", "dota"), f"data_mode {self.data_mode!r}"),
            (self.head_mode in ("deform", "plain"), f"head_mode {self.head_mode!r}"),
            (self.assigner in ("dynamic", "static"), f"assigner {self.assigner!r}"),
            (self.map_mode in ("allpoint", "voc07"), f"map_mode {self.map_mode!r}"),
            (self.image_size >= 16, "image_size must be >= 16"),
            (self.channels >= 1, "channels must be >= 1"),
            (1 <= self.num_classes <= 16, "num_classes out of range"),
            (0 < self.T < 1, "T must lie in (0, 1)"),
            (0 <= self.theta < 1, "theta must lie in [0, 1)"),
            (self.gamma >= 0, "gamma must be >= 0"),
            (0 < self.gauss_floor < 1, "gauss_floor must lie in (0, 1)"),
            (self.iterations >= 0, "iterations must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr_start > 0 and self.lr_end > 0, "learning rates must be positive"),
            (0 <= self.momentum < 1, "momentum must lie in [0, 1)"),
            (0 < self.nms_iou < 1, "nms_iou must lie in (0, 1)"),
            (0 <= self.conf_thresh < 1, "conf_thresh out of range"),
            (self.train_scenes >= 1, "train_scenes must be >= 1"),
            (self.val_scenes >= 0, "val_scenes must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ParseError(f"bad config: {message}")
        if self.data_mode == "dota" and not self.data_path:
            raise ParseError("bad config: dota mode needs data_path")
        if len(self.class_list()) != self.num_classes:
            raise ParseError("bad config: class_names must list num_classes names")

    def class_list(self) -> list[str]:
        return [c.strip() for c in self.class_names.split(",") if c.strip()]


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_config_text(text: str, overrides: dict | None = None) -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _FIELD_TYPES:
            raise ParseError(f"unknown key {key!r}", line=lineno)
        if key in values:
            raise ParseError(f"duplicate key {key!r}", line=lineno)
        values[key] = _convert(key, value, lineno)
    if overrides:
        values.update(overrides)
    config = RunConfig(**values)
    config.validate()
    return config


def _convert(key: str, value: str, lineno: int):
    target = _FIELD_TYPES[key]
    try:
        if target in ("int", int):
            return int(value)
        if target in ("float", float):
            return float(value)
        return value
    except ValueError:
        raise ParseError(f"bad value for {key!r}: {value!r}", line=lineno) from None


def load_config(path, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read config: {exc}") from None
    return parse_config_text(text, overrides)


def serialize_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{f.name}={getattr(config, f.name)}")
    return "\n".join(lines) + "\n"
