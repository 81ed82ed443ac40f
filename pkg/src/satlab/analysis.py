"""Mechanistic probes: gate statistics, gate interventions, logit lens, gate-function sweep."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from satlab.autodiff import Tensor, no_trace, token_nll
from satlab.config import ModelConfig, TrainConfig
from satlab.data import load_corpus
from satlab.model import Diagnostics, ModelWeights, decode, forward_with_diagnostics
from satlab.training import CHECKPOINT_NAME, MetricsLog, evaluate_perplexity, train

CV_FLOOR = 1e-8
TAIL_STEPS = 20  # final train loss is the mean over this many last updates


def _write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return path


def _write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _require_sat(weights: ModelWeights) -> None:
    if weights.config.variant != "satformer":
        raise ValueError(f"gate analyses need a satformer model, got {weights.config.variant!r}")


def _batches(windows: np.ndarray, batch_size: int):
    windows = np.asarray(windows)
    if windows.ndim != 2 or len(windows) == 0 or windows.shape[1] < 2:
        raise ValueError(f"expected non-empty windows [N, T+1], got shape {windows.shape}")
    for i in range(0, len(windows), batch_size):
        yield windows[i:i + batch_size]


# ---------------------------------------------------------------------------
# gate statistics


@dataclass
class GateStats:
    """Per consuming layer (layers 2..L, row 0 is layer 2)."""

    mean_alpha: np.ndarray  # [L-1, N_kv]
    sparsity: np.ndarray  # [L-1] fraction of exactly-zero gate values
    head_cv: np.ndarray  # [L-1]
    n_entries: int  # gate values per layer

    @property
    def layers(self) -> list[int]:
        return list(range(2, len(self.sparsity) + 2))

    def to_dict(self) -> dict:
        return {"layers": self.layers, "mean_alpha": self.mean_alpha.tolist(),
                "sparsity": self.sparsity.tolist(), "head_cv": self.head_cv.tolist(),
                "n_entries": self.n_entries}

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        n_kv = self.mean_alpha.shape[1]
        heat = _write_csv(out_dir / "gate_heatmap.csv",
                          ["layer"] + [f"head{j}" for j in range(n_kv)],
                          ([layer] + [float(x) for x in row]
                           for layer, row in zip(self.layers, self.mean_alpha)))
        per_layer = _write_csv(out_dir / "gate_layers.csv",
                               ["layer", "mean_alpha", "sparsity", "head_cv"],
                               ([layer, float(self.mean_alpha[i].mean()), float(self.sparsity[i]),
                                 float(self.head_cv[i])] for i, layer in enumerate(self.layers)))
        return [heat, per_layer, _write_json(out_dir / "gate_stats.json", self.to_dict())]


def gate_stats(diags) -> GateStats:
    """Exact aggregation of gate values from one or more diagnostics records."""
    if isinstance(diags, Diagnostics):
        diags = [diags]
    diags = list(diags)
    if not diags:
        raise ValueError("no diagnostics given")
    if any(d.alpha.shape[0] == 0 for d in diags):
        raise ValueError("diagnostics carry no gate values (not a satformer model)")
    n_layers, n_kv = diags[0].alpha.shape[0], diags[0].alpha.shape[-1]
    sums = np.zeros((n_layers, n_kv))
    zeros = np.zeros(n_layers)
    count = 0
    for d in diags:
        a = d.alpha.astype(np.float64).reshape(n_layers, -1, n_kv)
        sums += a.sum(axis=1)
        zeros += (d.alpha.reshape(n_layers, -1) == 0).sum(axis=1)
        count += a.shape[1]
    mean_alpha = sums / count
    head_cv = mean_alpha.std(axis=1) / np.maximum(mean_alpha.mean(axis=1), CV_FLOOR)
    return GateStats(mean_alpha, zeros / (count * n_kv), head_cv, count * n_kv)


def collect_gate_stats(weights: ModelWeights, windows: np.ndarray, batch_size: int = 16) -> GateStats:
    _require_sat(weights)
    with no_trace():
        diags = [forward_with_diagnostics(weights, chunk[:, :-1])[1] for chunk in _batches(windows, batch_size)]
    return gate_stats(diags)


# ---------------------------------------------------------------------------
# interventions


def layer_gate_mean(weights: ModelWeights, windows: np.ndarray, layer: int, per_head: bool = False,
                    batch_size: int = 16):
    """Mean gate at ``layer`` over the evaluation data (scalar, or [N_kv] with ``per_head``)."""
    _check_layer(weights, layer)
    total, count = 0.0, 0
    with no_trace():
        for chunk in _batches(windows, batch_size):
            a = forward_with_diagnostics(weights, chunk[:, :-1])[1].alpha[layer - 2].astype(np.float64)
            flat = a.reshape(-1, a.shape[-1])
            total = total + (flat.sum(axis=0) if per_head else flat.sum())
            count += flat.shape[0] if per_head else flat.size
    return total / count


def _check_layer(weights: ModelWeights, layer: int) -> None:
    _require_sat(weights)
    L = weights.config.n_layers
    if not 2 <= layer <= L:
        raise ValueError(f"gate intervention layer must lie in [2, {L}], got {layer}")


def intervention_override(weights: ModelWeights, windows: np.ndarray, layer: int, mode: str,
                          per_head: bool = False, batch_size: int = 16) -> dict:
    """The ``gate_override`` mapping that realizes an intervention."""
    _check_layer(weights, layer)
    if mode == "zero":
        return {layer: 0.0}
    if mode == "mean":
        return {layer: layer_gate_mean(weights, windows, layer, per_head, batch_size)}
    raise ValueError(f"unknown intervention mode {mode!r}; expected 'zero' or 'mean'")


def intervene(weights: ModelWeights, windows: np.ndarray, layer: int, mode: str,
              per_head: bool = False, batch_size: int = 16) -> float:
    """Perplexity with the gate at ``layer`` forced to zero or to its data mean.

    Only the target layer's gate is replaced; deeper layers still compute
    their own gates from the (now different) residual stream.
    """
    override = intervention_override(weights, windows, layer, mode, per_head, batch_size)
    return evaluate_perplexity(weights, windows, batch_size, gate_override=override).perplexity


def zero_gate_weights(weights: ModelWeights, layer: int) -> ModelWeights:
    """A copy with the gate projection of ``layer`` set to zero."""
    _check_layer(weights, layer)
    out = weights.copy()
    out.layers[layer - 1].attn.w_alpha.data[...] = 0.0
    return out


@dataclass
class InterventionRow:
    layer: int
    baseline: float
    zero: float
    mean: float
    gate_mean: float

    @property
    def zero_delta(self) -> float:
        return self.zero - self.baseline

    @property
    def mean_delta(self) -> float:
        return self.mean - self.baseline


@dataclass
class InterventionReport:
    rows: list = field(default_factory=list)
    per_head: bool = False

    COLUMNS = ("layer", "baseline_ppl", "zero_ppl", "mean_ppl", "zero_delta", "mean_delta", "gate_mean")

    def table(self) -> list[list]:
        return [[r.layer, r.baseline, r.zero, r.mean, r.zero_delta, r.mean_delta, r.gate_mean]
                for r in self.rows]

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        bundle = {"per_head_mean": self.per_head,
                  "rows": [dict(zip(self.COLUMNS, r)) for r in self.table()]}
        return [_write_csv(out_dir / "intervention.csv", self.COLUMNS, self.table()),
                _write_json(out_dir / "intervention.json", bundle)]


def intervention_report(weights: ModelWeights, windows: np.ndarray, per_head: bool = False,
                        batch_size: int = 16) -> InterventionReport:
    """Zero and mean interventions at every gated layer against one shared baseline."""
    _require_sat(weights)
    baseline = evaluate_perplexity(weights, windows, batch_size).perplexity
    report = InterventionReport(per_head=per_head)
    for layer in range(2, weights.config.n_layers + 1):
        mean_gate = layer_gate_mean(weights, windows, layer, per_head, batch_size)
        zero = evaluate_perplexity(weights, windows, batch_size, gate_override={layer: 0.0}).perplexity
        mean = evaluate_perplexity(weights, windows, batch_size, gate_override={layer: mean_gate}).perplexity
        report.rows.append(InterventionRow(layer, baseline, zero, mean, float(np.mean(mean_gate))))
    return report


# ---------------------------------------------------------------------------
# logit lens


@dataclass
class LogitLensReport:
    losses: np.ndarray  # [L+1]; entry 0 decodes the embedding output
    label: str = "model"

    @property
    def perplexities(self) -> np.ndarray:
        return np.exp(self.losses)

    def table(self) -> list[list]:
        return [[self.label, layer, float(loss), float(math.exp(loss))]
                for layer, loss in enumerate(self.losses)]


LENS_COLUMNS = ("model", "layer", "loss", "perplexity")


def logit_lens(weights: ModelWeights, windows: np.ndarray, batch_size: int = 16,
               label: str = "model") -> LogitLensReport:
    """Per-layer perplexity of each residual-stream state decoded by the final norm and unembedding."""
    L = weights.config.n_layers
    totals = np.zeros(L + 1)
    count = 0
    with no_trace():
        for chunk in _batches(windows, batch_size):
            targets = chunk[:, 1:]
            _, diags = forward_with_diagnostics(weights, chunk[:, :-1])
            for layer in range(L + 1):
                logits = decode(weights, Tensor(diags.hidden[layer]))
                totals[layer] += float(token_nll(logits.data, targets).astype(np.float64).sum())
            count += targets.size
    return LogitLensReport(totals / count, label)


def write_lens(reports: Sequence[LogitLensReport], out_dir) -> list[Path]:
    """One CSV with all reports stacked (comparison mode passes two) plus a JSON bundle."""
    out_dir = Path(out_dir)
    rows = [r for rep in reports for r in rep.table()]
    bundle = {rep.label: {"loss": rep.losses.tolist(), "perplexity": rep.perplexities.tolist()}
              for rep in reports}
    return [_write_csv(out_dir / "logit_lens.csv", LENS_COLUMNS, rows),
            _write_json(out_dir / "logit_lens.json", bundle)]


# ---------------------------------------------------------------------------
# gate-function sweep


@dataclass
class SweepCell:
    gate: str
    seed: int
    metrics: MetricsLog

    @property
    def key(self) -> str:
        return f"{self.gate}_seed{self.seed}"

    @property
    def initial_loss(self) -> float:
        return float(self.metrics.rows[0]["train_loss"])

    @property
    def final_train_loss(self) -> float:
        return float(self.metrics.train_losses()[-TAIL_STEPS:].mean())

    @property
    def final_val_loss(self) -> Optional[float]:
        return self.metrics.final_val_loss


@dataclass
class SweepResult:
    cells: list

    def summary(self) -> list[dict]:
        """Per gate: mean final losses over seeds, sorted by val loss then gate name."""
        out = {}
        for c in self.cells:
            out.setdefault(c.gate, []).append(c)
        rows = []
        for gate, cells in out.items():
            rows.append({
                "gate": gate,
                "final_val_loss": float(np.mean([c.final_val_loss for c in cells])),
                "final_train_loss": float(np.mean([c.final_train_loss for c in cells])),
                "initial_loss": float(np.mean([c.initial_loss for c in cells])),
                "n_seeds": len(cells),
            })
        rows.sort(key=lambda r: (r["final_val_loss"], r["gate"]))
        for rank, r in enumerate(rows, start=1):
            r["rank"] = rank
        return rows

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        steps = [r["step"] for r in self.cells[0].metrics.rows]
        for c in self.cells:
            if [r["step"] for r in c.metrics.rows] != steps:
                raise ValueError(f"cell {c.key} is not aligned on the common step index")
        curves = _write_csv(out_dir / "curves.csv", ["step"] + [c.key for c in self.cells],
                            ([s] + [float(c.metrics.rows[i]["train_loss"]) for c in self.cells]
                             for i, s in enumerate(steps)))
        cols = ("rank", "gate", "final_val_loss", "final_train_loss", "initial_loss", "n_seeds")
        summary = self.summary()
        table = _write_csv(out_dir / "summary.csv", cols, ([r[c] for c in cols] for r in summary))
        return [curves, table, _write_json(out_dir / "summary.json", summary)]


def ablation_sweep(model_cfg: ModelConfig, train_cfg: TrainConfig, gates: Sequence[str],
                   seeds: Sequence[int], out_dir=None, corpus: Optional[np.ndarray] = None) -> SweepResult:
    """Train one satformer per (gate, seed) on an identical data order.

    Cell ``(g, s)`` uses model seed ``s`` and data seed ``s``, so cells with
    the same seed start from the same weights and see the same batches.
    With ``out_dir`` each finished cell leaves ``cells/<gate>_seed<s>/done.json``
    and reruns skip it; a cell interrupted mid-run resumes from
    its checkpoint.
    """
    if corpus is None:
        corpus = load_corpus(train_cfg.corpus_path)
    out_dir = None if out_dir is None else Path(out_dir)
    cells = []
    for gate in gates:
        for seed in seeds:
            mcfg = model_cfg.replace(variant="satformer", gate_spec=gate, seed=seed)
            tcfg = train_cfg.replace(seed=seed)
            cell_dir = None if out_dir is None else out_dir / "cells" / f"{gate}_seed{seed}"
            done = None if cell_dir is None else cell_dir / "done.json"
            if done is not None and done.exists():
                metrics = MetricsLog.read_csv(cell_dir / "metrics.csv")
            else:
                ckpt = None if cell_dir is None else cell_dir / CHECKPOINT_NAME
                resume = ckpt if ckpt is not None and ckpt.exists() else None
                metrics = train(mcfg, tcfg, corpus=corpus, out_dir=cell_dir, resume=resume).metrics
                if done is not None:
                    _write_json(done, {"model": asdict(mcfg), "train": asdict(tcfg),
                                       "final_val_loss": metrics.final_val_loss})
            cells.append(SweepCell(gate, seed, metrics))
    result = SweepResult(cells)
    if out_dir is not None:
        result.write(out_dir)
    return result
