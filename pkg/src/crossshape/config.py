"""Run configuration as nested dataclasses plus the flat ``key = value`` text form."""

from __future__ import annotations

import copy
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

from .model import ModelConfig

SEED_ENV = "CROSSSHAPE_SEED"
DEFAULT_BATCH = {1: 6, 3: 3, 5: 2}


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    families: Tuple[str, ...] = ("chair", "table")
    n_train: int = 24
    n_val: int = 8
    n_test: int = 8
    n_points: int = 512
    # resolution of generated test shapes; above n_points exercises the resolution strategies
    test_points: int = 512
    seed: int = 0
    d2_bins: int = 32


@dataclass
class TrainConfig:
    graph_k: int = 1
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    max_epochs: Optional[int] = None
    phases: Tuple[str, ...] = ("csn", "compat", "csn", "compat", "csn")
    batch_size: Optional[int] = None

    def batch(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return DEFAULT_BATCH.get(self.graph_k, 2 if self.graph_k > 3 else 6)


@dataclass
class EvalConfig:
    strategy: str = "direct"
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        d, t, m = self.data, self.train, self.model
        counts = {"data.n_train": d.n_train, "data.n_val": d.n_val, "data.n_points": d.n_points,
                  "data.test_points": d.test_points, "train.patience": t.patience,
                  "model.num_classes": m.num_classes, "model.trunk.edge_k": m.trunk.edge_k}
        for k, v in counts.items():
            if v < 1:
                raise ConfigError(f"{k} must be positive")
        if d.n_test < 0 or t.graph_k < 0:
            raise ConfigError("n_test and graph_k must be non-negative")
        if t.graph_k >= d.n_train:
            raise ConfigError(f"graph_k={t.graph_k} needs more than {t.graph_k} training shapes")
        if m.trunk.edge_k >= d.n_points:
            raise ConfigError("edge_k must be below the point budget")
        if t.max_epochs is not None and t.max_epochs < 1:
            raise ConfigError("train.max_epochs must be positive")
        if t.batch_size is not None and t.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        for p in t.phases:
            if p not in ("csn", "compat"):
                raise ConfigError(f"unknown phase {p!r}")
        if self.eval.strategy not in ("direct", "upsample"):
            raise ConfigError(f"unknown eval strategy {self.eval.strategy!r}")
        if m.key_subsample is not None and m.key_subsample < 1:
            raise ConfigError("model.key_subsample must be positive")


def _flatten(obj, prefix: str = "") -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _render(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dumps_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_render(v)}\n" for k, v in _flatten(cfg).items())


def _parse(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        if text.lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _parse(text, inner, key)
    if origin in (tuple, typing.Tuple):
        items = [s.strip() for s in text.split(",") if s.strip()]
        return tuple(_parse(s, args[0], key) for s in items)
    try:
        if tp is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
    except ValueError as e:
        raise ConfigError(f"{key}: cannot parse {text!r} as {tp.__name__}") from e
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _assign(obj, path, text: str, key: str) -> None:
    hints = typing.get_type_hints(type(obj))
    name = path[0]
    if name not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    if len(path) > 1:
        child = getattr(obj, name)
        if not dataclasses.is_dataclass(child):
            raise ConfigError(f"unknown config key {key!r}")
        _assign(child, path[1:], text, key)
        return
    if dataclasses.is_dataclass(getattr(obj, name)):
        raise ConfigError(f"{key!r} is a section, not a value")
    setattr(obj, name, _parse(text, hints[name], key))


def loads_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (default: all defaults)."""
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        _assign(cfg, key.split("."), value, key)
    return cfg


def apply_env(cfg: RunConfig, env: Optional[Dict[str, str]] = None) -> RunConfig:
    """Let ``CROSSSHAPE_SEED`` override the run seed."""
    env = os.environ if env is None else env
    if SEED_ENV in env:
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as e:
            raise ConfigError(f"{SEED_ENV} must be an integer") from e
    return cfg
