"""Run configuration: YAML document plus command-line overrides."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .model import AblationFlags, ModelConfig
from .numerics import AdamState, ConfigurationError


@dataclass
class DataConfig:
    path: Optional[str] = None
    profile: str = "traffic"
    split: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    per_node_norm: bool = True
    train_stride: int = 1
    eval_stride: int = 1
    sample_rate_minutes: int = 5


@dataclass
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-5
    eps: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class TrainConfig:
    batch_size: int = 8
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    max_batches: Optional[int] = None  # per epoch; None = all
    threads: int = 1


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, n_nodes: Optional[int] = None) -> None:
        """Check every setting before any work starts."""
        self.model.validate(n_nodes)
        o, t = self.optim, self.train
        AdamState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps, weight_decay=o.weight_decay)
        if t.batch_size < 1 or t.max_epochs < 0 or t.patience < 1 or t.threads < 1:
            raise ConfigurationError("batch_size, patience and threads must be >= 1, max_epochs >= 0")
        if t.max_batches is not None and t.max_batches < 1:
            raise ConfigurationError("max_batches must be >= 1")
        d = self.data
        if d.train_stride < 1 or d.eval_stride < 1:
            raise ConfigurationError("window strides must be >= 1")
        if len(d.split) != 3:
            raise ConfigurationError("split needs three ratios")

    def model_hash(self) -> str:
        """Hash of everything that determines parameter shapes and semantics."""
        payload = {"model": asdict(self.model), "norm": self.data.per_node_norm}
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PROFILES: Dict[str, Dict[str, Any]] = {
    "traffic": {"model": {"L": 2016, "L_s": 12, "l": 8, "expected_P": 252}, "train": {"batch_size": 8}},
    "electricity": {
        "model": {"L": 168, "L_s": 24, "l": 12, "expected_P": 12},
        "data": {"sample_rate_minutes": 60},
        "train": {"batch_size": 16},
    },
    # desk-scale profile for the synthetic acceptance experiments
    "synthetic": {
        "model": {"L": 192, "L_s": 12, "l": 8, "d": 32, "encoder_layers": 2, "K_n": 3, "K_s": 6,
                  "backend_hidden": 16, "forecast_hidden": 128},
        "data": {"train_stride": 2},
        "train": {"batch_size": 8, "max_epochs": 30, "patience": 30},
    },
}


def _merge(base: dict, upd: dict) -> dict:
    out = dict(base)
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, d: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigurationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name) if name != "flags" else None
        if name == "flags":
            kwargs[name] = _build(AblationFlags, value)
        elif is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(cls.__name__, name, default, value)
    return cls(**kwargs)


def _coerce(owner: str, name: str, default, value):
    """Match scalar types to the field default; YAML reads ``1e30`` as a string."""
    if value is None or default is None:
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError
        elif isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise ValueError
            return int(float(value))
        elif isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{owner}.{name} expects {type(default).__name__}, got {value!r}") from None
    return value


def config_from_dict(d: dict) -> RunConfig:
    d = dict(d)
    profile = d.get("data", {}).get("profile", "traffic")
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}")
    merged = _merge(PROFILES[profile], d)
    return _build(RunConfig, merged)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> RunConfig:
    doc: dict = {}
    if path:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must be a mapping")
    if overrides:
        doc = _merge(doc, overrides)
    cfg = config_from_dict(doc)
    env_seed = os.environ.get("LMHR_SEED")
    if env_seed is not None:
        try:
            cfg.train.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigurationError(f"LMHR_SEED must be an integer, got {env_seed!r}") from exc
    return cfg
