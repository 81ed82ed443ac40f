"""Training loop: schedule, AdamW, clipping, evaluation and resumable runs."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from satlab.autodiff import Trace, cross_entropy_mean, no_trace, token_nll
from satlab.checkpoint import OptimizerState, read_checkpoint, save_checkpoint
from satlab.config import ConfigError, ModelConfig, TrainConfig
from satlab.data import batch_at, load_corpus, split_corpus, validation_windows
from satlab.model import ModelWeights, build_model, forward, is_decayed

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "lr", "train_loss", "grad_norm", "val_loss")
CHECKPOINT_NAME = "checkpoint.bin"
METRICS_NAME = "metrics.csv"


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, reason: str, checkpoint: Optional[Path]):
        self.step = step
        self.checkpoint = checkpoint
        kept = f"; last good checkpoint: {checkpoint}" if checkpoint else ""
        super().__init__(f"training diverged at step {step}: {reason}{kept}")


# ---------------------------------------------------------------------------
# schedule


def warmup_steps(cfg: TrainConfig) -> int:
    """Warmup length in updates, at least one and leaving at least one decay step."""
    if cfg.total_steps < 2:
        return 0
    w = int(math.floor(cfg.warmup_fraction * cfg.total_steps + 0.5))
    return min(max(1, w), cfg.total_steps - 1)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``min_lr_ratio * base_lr``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    w = warmup_steps(cfg)
    if step <= w and w > 0:
        return cfg.base_lr * (step / w)
    progress = (step - w) / (cfg.total_steps - w)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return cfg.base_lr * (cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine)


# ---------------------------------------------------------------------------
# optimizer


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    total = 0.0
    for g in grads.values():
        g64 = g.ravel().astype(np.float64)
        total += float(np.dot(g64, g64))
    return math.sqrt(total)


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return 1.0
    factor = max_norm / norm
    for g in grads.values():
        g *= factor
    return factor


def adamw_step(params: Mapping, grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float, cfg: TrainConfig,
               decayed: Callable[[str], bool] = is_decayed) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Decay multiplies a parameter by ``1 - lr * weight_decay`` before the
    Adam step and only for names accepted by ``decayed``. Non-finite
    gradients raise before anything is modified.
    """
    if lr < 0:
        raise ValueError(f"learning rate {lr} is negative")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in {name} at update {state.step + 1}")
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    t = state.step + 1
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and decayed(name):
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.step = t


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    loss: float
    perplexity: float
    n_tokens: int


def nll_sum(weights: ModelWeights, windows: np.ndarray, batch_size: int = 16,
            gate_override=None) -> tuple[float, int]:
    """Summed next-token NLL (float64) and token count over windows [N, T + 1]."""
    total, count = 0.0, 0
    with no_trace():
        for i in range(0, len(windows), batch_size):
            chunk = windows[i:i + batch_size]
            logits = forward(weights, chunk[:, :-1], gate_override=gate_override)
            nll = token_nll(logits.data, chunk[:, 1:])
            total += float(nll.astype(np.float64).sum())
            count += nll.size
    return total, count


def evaluate_perplexity(weights: ModelWeights, data: np.ndarray, batch_size: int = 16,
                        gate_override=None) -> EvalResult:
    """Token-weighted mean cross-entropy over windows [N, T + 1] and its exponential."""
    data = np.asarray(data)
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] < 2:
        raise ValueError(f"evaluation data must be non-empty windows [N, T+1], got {data.shape}")
    total, count = nll_sum(weights, data, batch_size, gate_override)
    loss = total / count
    return EvalResult(loss=loss, perplexity=math.exp(loss), n_tokens=count)


# ---------------------------------------------------------------------------
# metrics


class MetricsLog:
    """Per-update rows: step, lr, train_loss, grad_norm (pre-clip) and occasional val_loss."""

    def __init__(self, rows: Optional[list] = None):
        self.rows: list[dict] = [dict(r) for r in rows or []]

    def append(self, step: int, lr: float, train_loss: float, grad_norm: float,
               val_loss: Optional[float] = None) -> None:
        self.rows.append({"step": step, "lr": lr, "train_loss": train_loss,
                          "grad_norm": grad_norm, "val_loss": val_loss})

    def __len__(self) -> int:
        return len(self.rows)

    def train_losses(self) -> np.ndarray:
        return np.array([r["train_loss"] for r in self.rows])

    def val_losses(self) -> list[tuple[int, float]]:
        return [(r["step"], r["val_loss"]) for r in self.rows if r["val_loss"] is not None]

    @property
    def final_val_loss(self) -> Optional[float]:
        vals = self.val_losses()
        return vals[-1][1] if vals else None

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[c] is None else repr(r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.csv_text())
        return path

    @classmethod
    def read_csv(cls, path) -> "MetricsLog":
        out = cls()
        with open(path, newline="") as f:
            for r in csv.DictReader(f):
                out.append(int(r["step"]), float(r["lr"]), float(r["train_loss"]),
                           float(r["grad_norm"]), float(r["val_loss"]) if r["val_loss"] else None)
        return out


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    weights: ModelWeights
    state: OptimizerState
    metrics: MetricsLog
    checkpoint: Optional[Path] = None


def _config_mismatch(kind: str, stored, given) -> list[str]:
    return [f"{kind}.{f.name}: checkpoint has {getattr(stored, f.name)!r}, given {getattr(given, f.name)!r}"
            for f in fields(stored) if getattr(stored, f.name) != getattr(given, f.name)]


def train_step(weights: ModelWeights, inputs: np.ndarray, targets: np.ndarray) -> tuple[float, dict]:
    """Forward and backward on one batch; returns the loss and fresh gradients by name."""
    params = weights.named_parameters()
    for p in params.values():
        p.zero_grad()
    with Trace() as tr:
        loss = cross_entropy_mean(forward(weights, inputs), targets)
    tr.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    for p in params.values():
        p.zero_grad()
    return loss.item(), grads


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: Optional[np.ndarray] = None,
          out_dir=None, resume=None, stop_at: Optional[int] = None,
          init: Optional[ModelWeights] = None) -> TrainResult:
    """Run (or continue) the training loop.

    ``corpus`` defaults to the bytes at ``train_cfg.corpus_path``. With
    ``out_dir`` set, a checkpoint and the metrics CSV are written at every
    evaluation step, at ``stop_at`` and at the end. ``resume`` names a
    checkpoint written by an identical configuration; ``init`` replaces the
    seeded initialization with a copy of given weights. Training is a pure
    function of the configs and the corpus.
    """
    model_cfg.validate()
    train_cfg.validate()
    if train_cfg.seq_len > model_cfg.max_seq_len:
        raise ConfigError([f"train.seq_len {train_cfg.seq_len} exceeds max_seq_len {model_cfg.max_seq_len}"])
    if corpus is None:
        if train_cfg.corpus_path is None:
            raise ConfigError(["train.corpus_path: required when no corpus is passed"])
        corpus = load_corpus(train_cfg.corpus_path)
    if corpus.max() >= model_cfg.vocab_size:
        raise ConfigError([f"corpus ids reach {int(corpus.max())}, vocab_size is {model_cfg.vocab_size}"])
    train_split, val_split = split_corpus(corpus, train_cfg.seq_len, train_cfg.val_fraction)
    val = validation_windows(val_split, train_cfg.seq_len, train_cfg.eval_windows)

    if resume is not None:
        ckpt = read_checkpoint(resume)
        problems = _config_mismatch("model", ckpt.weights.config, model_cfg)
        if ckpt.train_config is None:
            problems.append("checkpoint carries no training config")
        else:
            problems += _config_mismatch("train", ckpt.train_config, train_cfg)
        if problems:
            raise ConfigError(problems)
        weights, state, metrics = ckpt.weights, ckpt.state, MetricsLog(ckpt.metrics)
    elif init is not None:
        if init.config != model_cfg:
            raise ConfigError(["init weights were built for a different model config"])
        weights = init.astype(np.dtype(train_cfg.dtype))
        state = OptimizerState.zeros_like(weights.named_parameters())
        metrics = MetricsLog()
    else:
        weights = build_model(model_cfg, dtype=np.dtype(train_cfg.dtype))
        state = OptimizerState.zeros_like(weights.named_parameters())
        metrics = MetricsLog()

    end = train_cfg.total_steps if stop_at is None else min(stop_at, train_cfg.total_steps)
    out_dir = None if out_dir is None else Path(out_dir)
    ckpt_path = None if out_dir is None else out_dir / CHECKPOINT_NAME
    last_good: Optional[Path] = ckpt_path if ckpt_path is not None and ckpt_path.exists() else None

    def persist():
        save_checkpoint(weights, state, ckpt_path, train_cfg, metrics.rows)
        metrics.write_csv(out_dir / METRICS_NAME)
        return ckpt_path

    params = weights.named_parameters()
    while state.step < end:
        step = state.step + 1
        inputs, targets = batch_at(train_split, train_cfg.seq_len, train_cfg.batch_size,
                                   train_cfg.seed, state.step)
        loss, grads = train_step(weights, inputs, targets)
        norm = global_norm(grads)
        if not (math.isfinite(loss) and math.isfinite(norm)):
            if out_dir is not None:
                metrics.write_csv(out_dir / METRICS_NAME)
            raise TrainingDiverged(step, f"loss={loss}, grad_norm={norm}", last_good)
        clip_global_norm(grads, train_cfg.clip_norm)
        lr = lr_at(step, train_cfg)
        adamw_step(params, grads, state, lr, train_cfg)

        val_loss = None
        if step % train_cfg.eval_interval == 0 or step == train_cfg.total_steps:
            val_loss = evaluate_perplexity(weights, val, train_cfg.batch_size).loss
            log.info("step %d lr %.3g train %.4f val %.4f", step, lr, loss, val_loss)
        metrics.append(step, lr, loss, norm, val_loss)
        if out_dir is not None and (val_loss is not None or step == end):
            last_good = persist()

    if out_dir is not None and last_good is None:
        last_good = persist()
    return TrainResult(weights, state, metrics, last_good)
