"""Flat key-value run configuration.

Format: one ``dotted.key = value`` per line; ``#`` starts a comment.
Sections: ``trainer.*`` (TrainConfig fields), ``loss.*`` (the five
weights), ``teacher.*`` (TeacherConfig fields). CLI ``--set key=value``
overrides win over the file.
"""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .exceptions import ConfigError
from .losses import LossWeights
from .teacher import TeacherConfig
from .trainer import TrainConfig


def _parse_scalar(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = _parse_scalar(value)
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def apply_overrides(flat: dict, overrides) -> dict:
    out = dict(flat)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, value = item.partition("=")
        out[key.strip()] = _parse_scalar(value)
    return out


_LOSS_KEYS = {f.name for f in fields(LossWeights)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
_TEACHER_KEYS = {f.name for f in fields(TeacherConfig)}


def build_train_config(flat: dict) -> TrainConfig:
    kwargs = {}
    loss_kwargs = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section == "trainer":
            if name == "background":
                kwargs[name] = _parse_background(value)
            elif name in _TRAIN_KEYS:
                kwargs[name] = value
            else:
                raise ConfigError(f"unknown trainer option {name!r}")
        elif section == "loss":
            if name not in _LOSS_KEYS:
                raise ConfigError(f"unknown loss weight {name!r}")
            loss_kwargs[name] = float(value)
        elif section == "teacher":
            continue
        else:
            raise ConfigError(f"unknown config section {section!r}")
    if loss_kwargs:
        kwargs["loss_weights"] = LossWeights(**{**vars(LossWeights()), **loss_kwargs})
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _parse_background(value):
    if isinstance(value, (int, float)):
        v = float(value)
        return (v, v, v)
    parts = [p for p in str(value).split(",") if p.strip()]
    if len(parts) != 3:
        raise ConfigError(f"background must be 'r,g,b' or a gray level, got {value!r}")
    return tuple(float(p) for p in parts)


def build_teacher_config(flat: dict) -> TeacherConfig:
    kwargs = {}
    for key, value in flat.items():
        section, _, name = key.partition(".")
        if section != "teacher":
            continue
        if name not in _TEACHER_KEYS:
            raise ConfigError(f"unknown teacher option {name!r}")
        kwargs[name] = value
    try:
        return TeacherConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def dump_train_config(cfg: TrainConfig) -> str:
    """Reproducible flat dump of the effective configuration."""
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if f.name == "loss_weights":
            for lf in fields(LossWeights):
                lines.append(f"loss.{lf.name} = {getattr(value, lf.name)}")
            continue
        if f.name == "background":
            value = ",".join(str(v) for v in value)
        if hasattr(value, "value"):
            value = value.value
        lines.append(f"trainer.{f.name} = {value}")
    return "\n".join(lines) + "\n"
