"""Run configuration: nested dataclasses loaded from JSON with dotted-path overrides."""

from __future__ import annotations

import dataclasses
import enum
import json
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

from .kernels import Aggregation, Distance, KernelSpec
from .world import FeedbackMode

SCHEMA_VERSION = 1


class RunMode(str, enum.Enum):
    DISCRETE = "Discrete"
    CONTINUOUS = "Continuous"


@dataclass
class PairPolicy:
    samples_per_prompt: int = 30
    top_n: int = 10
    last_n: int = 10
    negative_range: Optional[list[int]] = None  # [lo, hi) over 0-based ranks; [20, 30] = last 10 of 30

    def validate(self):
        M = self.samples_per_prompt
        if min(M, self.top_n, self.last_n) < 1:
            raise ValueError("samples_per_prompt, top_n and last_n must be positive")
        if self.negative_range is not None:
            lo, hi = self.negative_range
            if not 0 <= lo < hi <= M:
                raise ValueError(f"negative_range {self.negative_range} must satisfy 0 <= lo < hi <= {M}")
            if lo < self.top_n:
                raise ValueError("negative_range overlaps the chosen ranks")
        elif self.top_n + self.last_n > M:
            raise ValueError("top_n + last_n exceeds samples_per_prompt")


@dataclass
class DpoSection:
    beta: float = 0.2
    sigma_bar: float = 1.0


@dataclass
class KernelSection:
    aggregation: Aggregation = Aggregation.AVG_POOL
    distance: Distance = Distance.COSINE
    gamma: float = 3.0

    def spec(self) -> KernelSpec:
        return KernelSpec(self.aggregation, self.distance, self.gamma)


@dataclass
class JudgeSection:
    sharpness: float = float("inf")
    error_rate: float = 0.0
    other_mass: float = 0.0
    renormalize: bool = False


@dataclass
class WorldSection:
    prompts_per_category: int = 128
    heldout_per_category: int = 64
    presence_threshold: float = 0.5
    semantic_threshold: float = 0.5
    world_seed: int = 0


@dataclass
class ModelSection:
    enc_dim: int = 32
    hidden: int = 64
    n_hidden: int = 4
    dropout_layers: Optional[list[int]] = None
    dropout_rate: float = 0.15
    rows: int = 8
    dim: int = 16
    output_scale: float = 4.0
    stochastic_training: bool = False
    vocab_size: int = 64
    max_len: int = 12
    temperature: float = 1.0
    top_p: float = 1.0
    init_scale: float = 0.1


@dataclass
class OptimSection:
    steps: int = 200
    warmup: int = 20
    lr: float = 1e-3
    batch_size: int = 256


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    mode: RunMode = RunMode.CONTINUOUS
    seed: int = 0
    iterations: int = 3
    feedback: FeedbackMode = FeedbackMode.DIFF_OF_PROB
    plateau_delta: Optional[float] = None
    dpo: DpoSection = field(default_factory=DpoSection)
    kernel: KernelSection = field(default_factory=KernelSection)
    pairs: PairPolicy = field(default_factory=PairPolicy)
    judge: JudgeSection = field(default_factory=JudgeSection)
    world: WorldSection = field(default_factory=WorldSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {self.schema_version}")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        self.pairs.validate()
        self.kernel.spec()
        if self.optim.batch_size < 1 or self.optim.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")
        return self

    def to_json(self) -> dict:
        return _to_plain(self)

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        return _from_plain(cls, d).validate()


def continuous_defaults(**kw) -> RunConfig:
    return RunConfig(mode=RunMode.CONTINUOUS, **kw).validate()


def discrete_defaults(**kw) -> RunConfig:
    cfg = RunConfig(mode=RunMode.DISCRETE, **kw)
    cfg.pairs = PairPolicy(samples_per_prompt=10, top_n=1, last_n=1)
    return cfg.validate()


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, list):
        return [_to_plain(x) for x in obj]
    if isinstance(obj, float) and obj == float("inf"):
        return "inf"
    return obj


def _coerce(tp, value):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return None if value is None else _coerce(args[0], value)
    if origin is list:
        (inner,) = typing.get_args(tp)
        return [_coerce(inner, v) for v in value]
    if dataclasses.is_dataclass(tp):
        return _from_plain(tp, value)
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        return tp(value)
    if tp is float:
        return float(value)
    if tp is bool:
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if tp is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value}")
        return int(value)
    return value


def _from_plain(cls, d: dict):
    if not isinstance(d, dict):
        raise ValueError(f"expected an object for {cls.__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    return cls(**{k: _coerce(hints[k], v) for k, v in d.items()})


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    plain = cfg.to_json()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        node = plain
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ValueError(f"unknown config path {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ValueError(f"unknown config path {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return RunConfig.from_json(plain)


def load_config(path, overrides: list[str] | None = None) -> RunConfig:
    with open(path) as fh:
        data = json.load(fh)
    if "schema_version" not in data:
        raise ValueError("config file lacks schema_version")
    return apply_overrides(RunConfig.from_json(data), overrides or [])


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_json(), fh, indent=2, sort_keys=True)
