"""JSON run configuration.

Every section is a dataclass; ``load_config`` builds them from JSON and
rejects unknown fields, reporting the offending path (e.g. ``bench.grid[2]``).
"""

from __future__ import annotations

import dataclasses
import json
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path


@dataclass
class Dims:
    d: int = 16
    d_qk: int = 16
    d_v: int = 128
    m: int = 128


@dataclass
class BenchConfig:
    grid: list[int] = field(default_factory=lambda: [256, 512, 1024, 2048])
    engine: str = "both"
    feature: str = "relu"
    repeats: int = 11
    warmup: int = 3
    stabilizer: float = 0.0
    parallel: bool = False
    extend_to_crossover: bool = True
    max_len: int = 16384


@dataclass
class Lemma1Config:
    # (r, theta / pi) pairs
    pairs: list[list[float]] = field(
        default_factory=lambda: [[0.5, 0.0], [0.7, 0.5], [1.0, 2 / 3], [0.6, 0.25], [1.0, 1.0]]
    )
    ms: list[int] = field(default_factory=lambda: [1, 8, 64])
    trials: int = 200_000
    dim: int = 4
    n_stderr: float = 4.0


@dataclass
class Lemma2Config:
    pairs: list[list[float]] = field(default_factory=lambda: [[0.5, 0.5], [0.8, 2 / 3], [1.0, 1.0]])
    m: int = 16
    trials: int = 200_000
    rel_tol: float = 0.05
    abs_tol: float = 1e-8
    abs_below: float = 1e-6
    tail_ts: list[float] = field(default_factory=lambda: [2.0, 4.0, 8.0])
    tail_m: int = 64
    tail_r: float = 1.0
    tail_theta_over_pi: float = 0.5
    tail_trials: int = 50_000
    dim: int = 4


@dataclass
class Theorem1Config:
    M: int = 8
    N: int = 8
    d: int = 6
    d_qk: int = 4
    r: float = 0.5
    A: float = -1.0
    delta: float = 0.2
    n_seeds: int = 20
    # reference instance for the m formula
    m_rho_over_tau: float = 2.0
    m_delta: float = 0.5
    m_M: int = 4
    m_N: int = 4
    m_r: float = 1.0
    m_A: float = -1.0
    m_expected: int = 303


@dataclass
class VerifyConfig:
    lemma1: Lemma1Config = field(default_factory=Lemma1Config)
    lemma2: Lemma2Config = field(default_factory=Lemma2Config)
    theorem1: Theorem1Config = field(default_factory=Theorem1Config)


@dataclass
class DistillationSection:
    f: str = "relu"
    m: int = 16
    init: str = "gaussian_scaled"
    sigma_init: float | None = None
    A: float = -1.0
    loss: str = "output_mse"
    learning_rate: float = 1.0
    momentum: float = 0.9
    steps: int = 500
    batch: int = 4


@dataclass
class UptrainConfig:
    distillation: DistillationSection = field(default_factory=DistillationSection)
    n_tokens: int = 8
    d: int = 16
    teacher_scale: float = 2.0
    resample: bool = False


@dataclass
class DemoConfig:
    n_patches: int = 64
    n_targets: int = 4
    d: int = 64
    d_action: int = 2
    n_clusters: int = 4
    radius: float = 3.0
    random_ms: list[int] = field(default_factory=lambda: [64, 512])
    distill_steps: int = 1000
    distill_lr: float = 1.0
    distill_f: str = "exp"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    dims: Dims = field(default_factory=Dims)
    bench: BenchConfig = field(default_factory=BenchConfig)
    verify: VerifyConfig = field(default_factory=VerifyConfig)
    uptrain: UptrainConfig = field(default_factory=UptrainConfig)
    demo: DemoConfig = field(default_factory=DemoConfig)

    def validate(self) -> "RunConfig":
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        for path, value in _walk(self):
            if isinstance(value, bool):
                continue
            if isinstance(value, int) and not path.endswith(("A", "seed")) and value < 1:
                raise ConfigError(path, f"counts must be >= 1, got {value}")
            if isinstance(value, float) and not math.isfinite(value):
                raise ConfigError(path, "must be finite")
        if not self.bench.grid:
            raise ConfigError("bench.grid", "sweep grid must be nonempty")
        if self.bench.engine not in ("quadratic", "linear", "both"):
            raise ConfigError("bench.engine", f"unknown engine {self.bench.engine!r}")
        if self.bench.repeats < 5:
            raise ConfigError("bench.repeats", "need at least 5 repeats")
        return self


def _walk(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        path = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            yield from _walk(value, path + ".")
        elif isinstance(value, list):
            for i, item in enumerate(value):
                if not isinstance(item, list):
                    yield f"{path}[{i}]", item
        elif value is not None:
            yield path, value


def _coerce(tp, value, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected a list, got {type(value).__name__}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    raise ConfigError(path, f"unsupported field type {tp}")


def from_dict(cls, data, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown field")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        kwargs[key] = _coerce(hints[key], value, sub)
    return cls(**kwargs)


def to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return from_dict(RunConfig, data).validate()
