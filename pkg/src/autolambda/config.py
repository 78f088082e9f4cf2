"""Run configuration: nested dataclasses with strict JSON round-tripping."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import List, Optional


class ConfigError(ValueError):
    pass


@dataclass
class FamilyConfig:
    kind: str = "teacher"  # teacher | csv
    num_tasks: int = 3
    input_dim: int = 60
    rho: Optional[List[List[float]]] = None  # None -> identity
    features_per_task: object = 20
    teacher_seed: Optional[int] = None  # None -> run seed
    teacher_kind: str = "masked"  # masked | units
    teacher_width: int = 16
    teacher_gain: float = 2.0
    noise_std: float = 0.1
    n_train: int = 4096
    n_val: int = 256
    n_test: int = 1024
    classes: Optional[List[Optional[int]]] = None
    single_domain: bool = True
    noise_task: bool = False
    noise_dim: int = 4
    names: Optional[List[str]] = None
    csv_path: Optional[str] = None
    csv_schema: Optional[dict] = None


@dataclass
class NetworkConfig:
    trunk_layers: List[int] = field(default_factory=lambda: [64])
    head_hidden: List[int] = field(default_factory=list)
    activation: str = "tanh"
    zero_head_output: bool = True


@dataclass
class StrategyConfig:
    kind: str = "autolambda"  # equal | dwa | uncertainty | gcs | autolambda
    mode: str = "fd"  # fd | exact (autolambda)
    beta: float = 1e-4
    init: float = 0.1
    floor: Optional[float] = 1e-3
    eps_rule: str = "scaled"
    eps: float = 0.01
    sample_size: Optional[int] = None
    lambda_optimizer: str = "adam"  # adam | sgd
    primary: Optional[List[int]] = None  # None -> all tasks
    temperature: float = 2.0
    gcs_mode: str = "binary"
    mask: Optional[List[float]] = None


@dataclass
class TrainingConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 0.003
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch_mode: str = "swap"  # swap | disjoint_split | no_swap
    eval_every: int = 100
    steps_per_epoch: Optional[int] = None  # None -> pool size / batch size


@dataclass
class RunConfig:
    family: FamilyConfig = field(default_factory=FamilyConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    name: str = "run"

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d, "config")
        validate(cfg)
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``{"strategy.beta": 1e-3}``."""
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return RunConfig.from_dict(d)


def set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else known[name].default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def validate(cfg: RunConfig) -> None:
    f, s, t = cfg.family, cfg.strategy, cfg.training
    if f.kind not in ("teacher", "csv"):
        raise ConfigError(f"family.kind {f.kind!r}")
    if f.teacher_kind not in ("masked", "units"):
        raise ConfigError(f"family.teacher_kind {f.teacher_kind!r}")
    if f.kind == "csv" and (not f.csv_path or not f.csv_schema):
        raise ConfigError("csv family needs csv_path and csv_schema")
    if s.kind not in ("equal", "dwa", "uncertainty", "gcs", "autolambda"):
        raise ConfigError(f"strategy.kind {s.kind!r}")
    if s.mode not in ("fd", "exact"):
        raise ConfigError(f"strategy.mode {s.mode!r}")
    if s.eps_rule not in ("scaled", "fixed"):
        raise ConfigError(f"strategy.eps_rule {s.eps_rule!r}")
    if s.lambda_optimizer not in ("adam", "sgd"):
        raise ConfigError(f"strategy.lambda_optimizer {s.lambda_optimizer!r}")
    if s.gcs_mode not in ("binary", "cosine"):
        raise ConfigError(f"strategy.gcs_mode {s.gcs_mode!r}")
    if t.batch_mode not in ("swap", "disjoint_split", "no_swap"):
        raise ConfigError(f"training.batch_mode {t.batch_mode!r}")
    if t.steps < 0 or t.batch_size < 1 or t.lr <= 0 or t.eval_every < 1:
        raise ConfigError("training: steps >= 0, batch_size >= 1, lr > 0, eval_every >= 1 required")
    if s.beta < 0 or s.eps <= 0:
        raise ConfigError("strategy: beta >= 0 and eps > 0 required")
    if s.primary is not None and not s.primary:
        raise ConfigError("strategy.primary must be null or nonempty")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
