"""Flat ``section.key=value`` run configuration shared by all CLI commands."""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .model import ModelConfig
from .pretrain import TrainConfig
from .rank import RankConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "model": (ModelConfig, {"vocab_size"}),
    "train": (TrainConfig, {"seed", "checkpoint_dir"}),
    "rank": (RankConfig, set()),
}
_EXTRA = {
    "seed": 0,
    "threads": 1,
    "corpus.min_count": 1,
    "paths.corpus": "",
    "paths.vocab": "",
    "paths.checkpoint": "",
    "paths.output": "",
}


def _field_type(cls, f):
    hint = typing.get_type_hints(cls)[f.name]
    if isinstance(hint, types.UnionType) or typing.get_origin(hint) is typing.Union:
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    return hint


def _schema() -> dict[str, tuple[type, object]]:
    schema = {}
    for section, (cls, skip) in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.name in skip:
                continue
            schema[f"{section}.{f.name}"] = (_field_type(cls, f), f.default)
    for key, default in _EXTRA.items():
        schema[key] = (type(default), default)
    return schema


SCHEMA = _schema()


def coerce(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    typ, _ = SCHEMA[key]
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if typ is str:
        return raw
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def parse_lines(text: str, source: str = "<config>") -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value")
        key, raw = line.split("=", 1)
        values[key.strip()] = coerce(key.strip(), raw)
    return values


class RunConfig:
    """Resolved configuration: schema defaults < config file < overrides."""

    def __init__(self, values: dict | None = None):
        self.values = {k: d for k, (_, d) in SCHEMA.items()}
        if values:
            for k, v in values.items():
                if k not in SCHEMA:
                    raise ConfigError(f"unknown config key {k!r}")
                self.values[k] = v

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        values = parse_lines(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
        values.update(overrides or {})
        return cls(values)

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def _section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, **self._section("model"))

    def train_config(self, checkpoint_dir: str | None = None) -> TrainConfig:
        return TrainConfig(seed=self.values["seed"], checkpoint_dir=checkpoint_dir, **self._section("train"))

    def rank_config(self) -> RankConfig:
        return RankConfig(**self._section("rank"))

    def to_text(self) -> str:
        """Every resolved key, sorted; loading this text replays the run."""
        out = []
        for k in sorted(self.values):
            v = self.values[k]
            out.append(f"{k}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"
