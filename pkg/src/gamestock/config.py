"""Run configuration: one YAML file of dotted sections, validated against known keys."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

import yaml

from .game import default_beta


class ConfigError(ValueError):
    """Unknown key or invalid value; ``key`` names the offending dotted key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class DataSection:
    panel: str | None = None
    industries: str | None = None
    holdings: str | None = None
    events: str | None = None
    checkpoint: str | None = None
    predictions: str | None = None


@dataclass
class SplitSection:
    # inclusive [start, end] date pairs; unset -> chronological fractions
    train: list | None = None
    valid: list | None = None
    test: list | None = None
    fractions: list = field(default_factory=lambda: [0.7, 0.2, 0.1])


@dataclass
class WaveletSection:
    name: str = "db4"
    level: int = 3
    mode: str = "periodization"


@dataclass
class ModelSection:
    lookback: int = 20
    embed_dim: int = 48
    graph_hidden: int = 64
    graph_layers: int = 2
    normalization: str = "degree"
    lambda_eq: float = 0.1
    action_hidden: int = 32
    use_mdwt: bool = True
    use_hgcn: bool = True
    use_gre: bool = True


@dataclass
class GameSection:
    alpha_decay: float = 0.1
    lambda_follow: float = 0.1
    beta: list = field(default_factory=lambda: default_beta().ravel().tolist())
    pos_dim: int = 16


@dataclass
class TrainSection:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    max_epochs: int = 300
    patience: int = 20
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    seed: int = 0


@dataclass
class SyntheticSection:
    n_stocks: int = 60
    n_industries: int = 6
    n_days: int = 600
    noise_scale: float = 0.01
    event_rate: float = 0.02
    event_impact: float = 0.01
    event_decay: float = 0.1
    industry_scale: float = 0.004
    industry_persistence: float = 0.0
    start_date: str = "2017-01-03"


@dataclass
class OutputSection:
    root: str = "runs"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    wavelet: WaveletSection = field(default_factory=WaveletSection)
    model: ModelSection = field(default_factory=ModelSection)
    game: GameSection = field(default_factory=GameSection)
    train: TrainSection = field(default_factory=TrainSection)
    synthetic: SyntheticSection = field(default_factory=SyntheticSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        cfg = cls()
        for key, value in _flatten(raw or {}):
            cfg.set(key, value)
        cfg.validate()
        return cfg

    def set(self, key: str, value: Any) -> None:
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"unknown config key {key!r}", key)
        section_name, name = parts
        section = getattr(self, section_name, None) if section_name in _section_names() else None
        if section is None or name not in {f.name for f in fields(section)}:
            raise ConfigError(f"unknown config key {key!r}", key)
        current = getattr(section, name)
        setattr(section, name, _coerce(key, value, current, section, name))

    def with_overrides(self, overrides: Iterable[str]) -> "RunConfig":
        cfg = copy.deepcopy(self)
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            cfg.set(key.strip(), yaml.safe_load(text))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        m, w = self.model, self.wavelet
        for key in ("embed_dim", "graph_hidden", "graph_layers", "lookback", "action_hidden"):
            if getattr(m, key) <= 0:
                raise ConfigError(f"model.{key} must be positive", f"model.{key}")
        if m.lambda_eq < 0:
            raise ConfigError("model.lambda_eq must be >= 0", "model.lambda_eq")
        if w.level < 1:
            raise ConfigError("wavelet.level must be >= 1", "wavelet.level")
        if m.use_mdwt and m.lookback < 2 ** w.level:
            raise ConfigError(f"model.lookback {m.lookback} < 2**wavelet.level", "model.lookback")
        if m.normalization not in ("degree", "none"):
            raise ConfigError("model.normalization must be 'degree' or 'none'", "model.normalization")
        if len(self.game.beta) != 9:
            raise ConfigError("game.beta must be a 3x3 row-major list of 9 numbers", "game.beta")
        if self.game.pos_dim <= 0 or self.game.pos_dim % 2:
            raise ConfigError("game.pos_dim must be a positive even integer", "game.pos_dim")
        for name in ("train", "valid", "test"):
            pair = getattr(self.split, name)
            if pair is not None and len(pair) != 2:
                raise ConfigError(f"split.{name} must be a [start, end] pair", f"split.{name}")


def _section_names() -> set[str]:
    return {f.name for f in fields(RunConfig)}


def _flatten(raw: dict, prefix: str = "") -> Iterable[tuple[str, Any]]:
    for k, v in raw.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _coerce(key: str, value: Any, current: Any, section, name: str) -> Any:
    hint = {f.name: f.type for f in fields(section)}[name]
    if value is None:
        if "None" in str(hint):
            return None
        raise ConfigError(f"{key} may not be null", key)
    if isinstance(current, bool) or hint == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true/false, got {value!r}", key)
        return value
    if hint == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}", key)
        return value
    if hint == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}", key)
        return float(value)
    if hint == "list" or "list" in str(hint):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}", key)
        return [str(v) if hasattr(v, "isoformat") else v for v in value]
    return str(value)


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> RunConfig:
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw).with_overrides(overrides)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
