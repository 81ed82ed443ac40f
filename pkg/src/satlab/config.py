"""Experiment configuration: model shape, training recipe, and strict JSON loading."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

VARIANTS = ("transformer", "resformer", "satformer")
GATE_SPECS = ("relu", "sigmoid", "softmax", "softmax_sigmoid", "tanh", "identity")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class ModelConfig:
    variant: str
    gate_spec: str = "relu"
    d_model: int = 64
    n_layers: int = 6
    n_heads: int = 4
    n_kv_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 256
    max_seq_len: int = 128
    tie_embeddings: bool = True
    seed: int = 0

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def problems(self) -> list[str]:
        out = []
        if self.variant not in VARIANTS:
            out.append(f"model.variant: {self.variant!r} not one of {VARIANTS}")
        if self.gate_spec not in GATE_SPECS:
            out.append(f"model.gate_spec: {self.gate_spec!r} not one of {GATE_SPECS}")
        for name in ("d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "max_seq_len"):
            if getattr(self, name) <= 0:
                out.append(f"model.{name}: must be positive")
        if self.n_layers < 2:
            out.append("model.n_layers: must be >= 2 (one value source plus at least one consumer)")
        if self.n_heads > 0 and self.d_model % self.n_heads:
            out.append(f"model.d_model: {self.d_model} not divisible by n_heads={self.n_heads}")
        elif self.n_heads > 0 and self.d_head % 2:
            out.append(f"model.d_model: head size {self.d_head} must be even for rotary embedding")
        if self.n_kv_heads > 0 and self.n_heads % self.n_kv_heads:
            out.append(f"model.n_heads: {self.n_heads} not divisible by n_kv_heads={self.n_kv_heads}")
        return out

    def validate(self) -> "ModelConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class TrainConfig:
    base_lr: float
    total_steps: int
    warmup_fraction: float = 0.01
    min_lr_ratio: float = 0.1
    weight_decay: float = 0.1
    clip_norm: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    batch_size: int = 8
    seq_len: int = 128
    eval_interval: int = 250
    seed: int = 0
    corpus_path: Optional[str] = None
    val_fraction: float = 0.05
    eval_windows: int = 64
    dtype: str = "float32"

    def problems(self) -> list[str]:
        out = []
        if not 0 < self.warmup_fraction < 1:
            out.append("train.warmup_fraction: must lie in (0, 1)")
        if not 0 < self.min_lr_ratio <= 1:
            out.append("train.min_lr_ratio: must lie in (0, 1]")
        if self.clip_norm <= 0:
            out.append("train.clip_norm: must be positive")
        if self.base_lr < 0:
            out.append("train.base_lr: must be non-negative")
        for name in ("total_steps", "batch_size", "seq_len", "eval_interval", "eval_windows"):
            if getattr(self, name) <= 0:
                out.append(f"train.{name}: must be positive")
        if not 0 < self.val_fraction < 1:
            out.append("train.val_fraction: must lie in (0, 1)")
        if self.weight_decay < 0:
            out.append("train.weight_decay: must be non-negative")
        if self.dtype not in DTYPES:
            out.append(f"train.dtype: {self.dtype!r} not one of {DTYPES}")
        return out

    def validate(self) -> "TrainConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class SweepConfig:
    gates: list = field(default_factory=lambda: list(GATE_SPECS))
    seeds: list = field(default_factory=lambda: [0])

    def problems(self) -> list[str]:
        out = [f"sweep.gates: unknown gate {g!r}" for g in self.gates if g not in GATE_SPECS]
        if not self.gates:
            out.append("sweep.gates: empty")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            out.append("sweep.seeds: must be a non-empty list of integers")
        return out


@dataclass
class ExperimentConfig:
    model: ModelConfig
    train: TrainConfig
    run_name: str
    output_dir: str = "runs"
    sweep: Optional[SweepConfig] = None

    def validate(self) -> "ExperimentConfig":
        problems = self.model.problems() + self.train.problems()
        if self.sweep is not None:
            problems += self.sweep.problems()
        if self.train.seq_len > self.model.max_seq_len:
            problems.append(
                f"train.seq_len: {self.train.seq_len} exceeds model.max_seq_len={self.model.max_seq_len}"
            )
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if self.sweep is None:
            d.pop("sweep")
        return d


DESK = ModelConfig(variant="satformer")
SMALL = ModelConfig(
    variant="satformer",
    d_model=768,
    n_layers=11,
    n_heads=12,
    n_kv_heads=12,
    d_ff=3072,
    vocab_size=32000,
    max_seq_len=4096,
    tie_embeddings=False,
)
PRESETS = {"desk": DESK, "small": SMALL}


# ---------------------------------------------------------------------------
# strict loading

_NESTED = {"model": ModelConfig, "train": TrainConfig, "sweep": SweepConfig}


def _check_type(value: Any, hint: Any, where: str) -> Optional[str]:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        hint = args[0]
    if hint is bool:
        ok = isinstance(value, bool)
    elif hint is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif hint is str:
        ok = isinstance(value, str)
    elif hint is list:
        ok = isinstance(value, list)
    else:
        ok = True
    return None if ok else f"{where}: expected {getattr(hint, '__name__', hint)}, got {value!r}"


def _build(cls, data: Any, where: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{where}: expected an object")
        return None
    hints = typing.get_type_hints(cls)
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            problems.append(f"{where}.{key}: unknown key" if where else f"{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        path = f"{where}.{name}" if where else name
        required = f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
        if name not in data:
            if required:
                problems.append(f"{path}: missing required field")
            continue
        value = data[name]
        if name in _NESTED and cls is ExperimentConfig:
            if value is None and name == "sweep":
                continue
            value = _build(_NESTED[name], value, name, problems)
            if value is None:
                continue
        else:
            msg = _check_type(value, hints[name], path)
            if msg:
                problems.append(msg)
                continue
            if hints[name] is float and isinstance(value, int):
                value = float(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError:  # missing required field, already reported
        return None


def experiment_from_dict(data: dict) -> ExperimentConfig:
    problems: list[str] = []
    cfg = _build(ExperimentConfig, data, "", problems)
    if problems or cfg is None:
        raise ConfigError(problems or ["config: could not be parsed"])
    return cfg.validate()


def model_from_dict(data: dict) -> ModelConfig:
    problems: list[str] = []
    cfg = _build(ModelConfig, data, "model", problems)
    if problems or cfg is None:
        raise ConfigError(problems)
    return cfg.validate()


def train_from_dict(data: dict) -> TrainConfig:
    problems: list[str] = []
    cfg = _build(TrainConfig, data, "train", problems)
    if problems or cfg is None:
        raise ConfigError(problems)
    return cfg.validate()


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return experiment_from_dict(data)
