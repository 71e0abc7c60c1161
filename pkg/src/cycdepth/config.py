"""Plain-text ``key=value`` run configuration.

Keys are ``section.field`` for the generator, model, train, loss, eval and
data sections, plus the top-level ``out_dir``. Blank lines and ``#`` comments
are ignored. Unknown keys are an error, and :meth:`RunConfig.echo` writes
back every effective value (defaults included) for the run log header.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .losses import LossWeights
from .metrics import EvalConfig
from .networks import ConfigError, GeneratorConfig
from .trainer import TrainConfig


@dataclass
class ModelConfig:
    disc_channels: int = 8


@dataclass
class DataConfig:
    """Either folders in the dataset layout or on-the-fly synthetic scenes."""
    train_dir: str = ""
    test_dir: str = ""
    synthetic_train: int = 1000
    synthetic_test: int = 100
    synthetic_seed: int = 1
    synthetic_test_seed: int = 2
    width: int = 128
    height: int = 64


SECTIONS = ("generator", "model", "train", "loss", "eval", "data")


@dataclass
class RunConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    eval: EvalConfig = field(default_factory=lambda: EvalConfig(evaluate_on="disparity"))
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: str = "runs/default"

    def items(self):
        """(key, value) for every effective parameter, in a stable order."""
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                yield f"{sec}.{f.name}", getattr(obj, f.name)
        yield "out_dir", self.out_dir

    def echo(self) -> str:
        return "".join(f"{k}={format_value(v)}\n" for k, v in self.items())

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return apply_overrides(self, overrides)


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _parse_value(key: str, text: str, default):
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(t)
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
        if isinstance(default, str):
            return t
        # tuples and optional tuples
        if t.lower() in ("none", ""):
            return None if default is None else ()
        items = [x.strip() for x in t.split(",") if x.strip()]
        if isinstance(default, tuple) and default and all(isinstance(x, int) for x in default):
            return tuple(int(x) for x in items)
        return tuple(float(x) for x in items)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}") from exc


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Return a copy of ``cfg`` with ``{dotted key: text value}`` applied."""
    per_section: dict = {s: {} for s in SECTIONS}
    out_dir = cfg.out_dir
    for key, text in overrides.items():
        if key == "out_dir":
            out_dir = text.strip()
            continue
        sec, _, name = key.partition(".")
        if sec not in per_section or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(cfg, sec)
        names = {f.name for f in fields(obj)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        per_section[sec][name] = _parse_value(key, text, getattr(obj, name))
    try:
        new = {s: replace(getattr(cfg, s), **vals) if vals else getattr(cfg, s) for s, vals in per_section.items()}
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(**new, out_dir=out_dir)


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        k = k.strip()
        if k in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {k!r}")
        overrides[k] = v
    return apply_overrides(base or RunConfig(), overrides)


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())
