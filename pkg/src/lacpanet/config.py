"""Flat ``section.key = value`` run configuration.

Sections are ``model.`` (ModelConfig), ``train.`` (TrainConfig) and
``data.`` (PhantomConfig); the bare key ``seed`` is the global seed.  Tuple
fields take comma-separated numbers; curves are ``data.curve0`` ...
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig
from .phantom import PhantomConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": PhantomConfig}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(cls, name: str, text: str):
    hints = typing.get_type_hints(cls)
    kind = hints[name]
    default = next(f for f in dataclasses.fields(cls) if f.name == name).default
    if kind is bool:
        return _parse_bool(text)
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text.strip()
    if isinstance(default, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        cast = int if all(isinstance(v, int) for v in default) else float
        return tuple(cast(p) for p in parts)
    raise ConfigError(f"cannot parse field {name!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: PhantomConfig = field(default_factory=PhantomConfig)
    seed: int = 0

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        values: dict[str, dict] = {s: {} for s in _SECTIONS}
        seed = 0
        curves: dict[int, tuple[float, ...]] = {}
        for key, text in pairs.items():
            if key == "seed":
                seed = int(text)
                continue
            section, _, name = key.partition(".")
            if section not in _SECTIONS or not name:
                raise ConfigError(f"unknown config key {key!r}")
            cls_ = _SECTIONS[section]
            if section == "data" and name.startswith("curve") and name[5:].isdigit():
                curves[int(name[5:])] = tuple(float(p) for p in text.split(","))
                continue
            if name == "curves" or name not in {f.name for f in dataclasses.fields(cls_)}:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                values[section][name] = _coerce(cls_, name, text)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key!r}: {exc}") from exc
        if curves:
            if sorted(curves) != list(range(len(curves))):
                raise ConfigError("curve keys must be data.curve0 .. data.curveK without gaps")
            values["data"]["curves"] = tuple(curves[i] for i in range(len(curves)))
        try:
            return cls(ModelConfig(**values["model"]), TrainConfig(**values["train"]),
                       PhantomConfig(**values["data"]), seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_text(cls, text: str, overrides: dict[str, str] | None = None) -> "RunConfig":
        pairs = parse_pairs(text)
        pairs.update(overrides or {})
        return cls.from_pairs(pairs)

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        text = Path(path).read_text() if path else ""
        return cls.from_text(text, overrides)

    def to_pairs(self) -> dict[str, str]:
        out = {"seed": str(self.seed)}
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                value = getattr(obj, f.name)
                if section == "data" and f.name == "curves":
                    for i, curve in enumerate(value):
                        out[f"data.curve{i}"] = _format(curve)
                else:
                    out[f"{section}.{f.name}"] = _format(value)
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_pairs().items())


def parse_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def parse_override(item: str) -> tuple[str, str]:
    key, sep, value = item.partition("=")
    if not sep:
        raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
    return key.strip(), value.strip()
