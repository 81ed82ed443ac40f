import csv
import math
from pathlib import Path

import numpy as np
import pytest

from satlab import analysis
from satlab.analysis import (
    GateStats,
    ablation_sweep,
    collect_gate_stats,
    gate_stats,
    intervene,
    intervention_report,
    layer_gate_mean,
    logit_lens,
    write_lens,
    zero_gate_weights,
)
from satlab.config import ModelConfig, TrainConfig
from satlab.model import Diagnostics, build_model, forward_with_diagnostics
from satlab.training import evaluate_perplexity

CORPUS = Path(__file__).resolve().parents[1] / "data" / "shakespeare.txt"


def tiny(variant="satformer", **kw):
    base = dict(variant=variant, d_model=16, n_layers=3, n_heads=2, n_kv_heads=2, d_ff=32,
                vocab_size=256, max_seq_len=32)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def windows():
    data = np.frombuffer(CORPUS.read_bytes()[:4000], dtype=np.uint8).astype(np.int64)
    return np.stack([data[i * 16:i * 16 + 17] for i in range(12)])


def diag(alpha):
    return Diagnostics(alpha=np.asarray(alpha), hidden=np.zeros((1, 1, 1, 1)))


# --- gate statistics ------------------------------------------------------------


def test_gate_stats_against_direct_recomputation():
    rng = np.random.default_rng(0)
    a1 = np.maximum(rng.normal(size=(3, 2, 5, 4)), 0)
    a2 = np.maximum(rng.normal(size=(3, 1, 5, 4)), 0)
    stats = gate_stats([diag(a1), diag(a2)])
    joined = np.concatenate([a1, a2], axis=1)
    for layer in range(3):
        flat = joined[layer].reshape(-1, 4)
        means = [sum(flat[:, j]) / len(flat) for j in range(4)]
        assert np.allclose(stats.mean_alpha[layer], means, rtol=1e-12)
        assert stats.sparsity[layer] == sum(1 for x in flat.ravel() if x == 0) / flat.size
        mu = sum(means) / 4
        sd = math.sqrt(sum((m - mu) ** 2 for m in means) / 4)
        assert stats.head_cv[layer] == pytest.approx(sd / mu, rel=1e-12)
    assert stats.layers == [2, 3, 4] and stats.n_entries == 60


def test_gate_stats_zero_and_constant_gates():
    zero = gate_stats(diag(np.zeros((2, 2, 3, 4))))
    assert not zero.mean_alpha.any() and np.all(zero.sparsity == 1) and not zero.head_cv.any()
    const = gate_stats(diag(np.full((2, 2, 3, 4), 0.7)))
    assert np.all(const.sparsity == 0) and np.all(const.head_cv == 0)


def test_gate_stats_rejects_ungated():
    with pytest.raises(ValueError):
        gate_stats(diag(np.zeros((0, 2, 3, 4))))
    with pytest.raises(ValueError):
        collect_gate_stats(build_model(tiny("transformer")), np.zeros((1, 5), int))


def test_gate_stats_export(tmp_path, windows):
    stats = collect_gate_stats(build_model(tiny()), windows, batch_size=5)
    stats.write(tmp_path)
    rows = list(csv.reader(open(tmp_path / "gate_heatmap.csv")))
    assert rows[0] == ["layer", "head0", "head1"] and [r[0] for r in rows[1:]] == ["2", "3"]
    assert np.allclose(np.array(rows[1][1:], float), stats.mean_alpha[0])
    assert (tmp_path / "gate_layers.csv").exists() and (tmp_path / "gate_stats.json").exists()


def test_collect_gate_stats_batching_invariant(windows):
    w = build_model(tiny())
    a = collect_gate_stats(w, windows, batch_size=12)
    b = collect_gate_stats(w, windows, batch_size=5)
    assert np.allclose(a.mean_alpha, b.mean_alpha, rtol=1e-12) and np.array_equal(a.sparsity, b.sparsity)


# --- interventions --------------------------------------------------------------


def test_zero_gate_model_interventions_are_exact_noops(windows):
    w = build_model(tiny(), dtype=np.float64)
    for lw in w.layers[1:]:
        lw.attn.w_alpha.data[...] = 0.0
    base = evaluate_perplexity(w, windows).perplexity
    for layer in (2, 3):
        assert intervene(w, windows, layer, "zero") == base
        assert intervene(w, windows, layer, "mean") == base


def test_zero_mode_two_routes_agree(windows):
    w = build_model(tiny(), dtype=np.float64)
    for layer in (2, 3):
        via_override = intervene(w, windows, layer, "zero")
        via_weights = evaluate_perplexity(zero_gate_weights(w, layer), windows).perplexity
        assert abs(via_override - via_weights) < 1e-6


def test_mean_mode_on_constant_gate_is_noop(windows):
    cfg = tiny(gate_spec="sigmoid")
    w = build_model(cfg, dtype=np.float64)
    w.layers[1].attn.w_alpha.data[...] = 0.0  # sigmoid(0) = 0.5 everywhere at layer 2
    base = evaluate_perplexity(w, windows).perplexity
    assert layer_gate_mean(w, windows, 2) == 0.5
    assert abs(intervene(w, windows, 2, "mean") - base) < 1e-6
    assert abs(intervene(w, windows, 2, "mean", per_head=True) - base) < 1e-6


def test_mean_value_is_data_mean(windows):
    w = build_model(tiny())
    alphas = np.concatenate([forward_with_diagnostics(w, windows[i:i + 4, :-1])[1].alpha[1]
                             for i in range(0, 12, 4)], axis=0).astype(np.float64)
    assert layer_gate_mean(w, windows, 3, batch_size=4) == pytest.approx(alphas.mean(), rel=1e-12)
    assert np.allclose(layer_gate_mean(w, windows, 3, per_head=True, batch_size=4),
                       alphas.reshape(-1, 2).mean(0), rtol=1e-12)


def test_intervention_errors(windows):
    w = build_model(tiny())
    for layer in (1, 4):
        with pytest.raises(ValueError):
            intervene(w, windows, layer, "zero")
    with pytest.raises(ValueError):
        intervene(w, windows, 2, "shuffle")
    with pytest.raises(ValueError):
        intervene(build_model(tiny("resformer")), windows, 2, "zero")


def test_intervention_report_structure_and_read_only(windows, tmp_path):
    w = build_model(tiny())
    digest = w.digest()
    report = intervention_report(w, windows, batch_size=6)
    assert [r.layer for r in report.rows] == [2, 3]
    for r in report.rows:
        assert r.zero_delta == r.zero - r.baseline and r.mean_delta == r.mean - r.baseline
    report.write(tmp_path)
    rows = list(csv.reader(open(tmp_path / "intervention.csv")))
    assert rows[0] == list(report.COLUMNS) and len(rows) == 3
    assert w.digest() == digest


# --- logit lens -----------------------------------------------------------------


@pytest.mark.parametrize("variant", ["transformer", "resformer", "satformer"])
def test_lens_final_layer_is_model_perplexity(variant, windows):
    w = build_model(tiny(variant))
    digest = w.digest()
    rep = logit_lens(w, windows, batch_size=5)
    assert len(rep.losses) == 4
    model = evaluate_perplexity(w, windows, batch_size=5).perplexity
    assert abs(rep.perplexities[-1] - model) / model < 1e-6
    assert w.digest() == digest


def test_lens_at_init_is_near_uniform(windows):
    rep = logit_lens(build_model(tiny()), windows)
    assert np.all(np.abs(rep.perplexities - 256) <= 0.2 * 256)


def test_lens_comparison_rows(windows, tmp_path):
    a = logit_lens(build_model(tiny()), windows, label="satformer")
    b = logit_lens(build_model(tiny("transformer")), windows, label="transformer")
    write_lens([a, b], tmp_path)
    rows = list(csv.reader(open(tmp_path / "logit_lens.csv")))
    assert rows[0] == ["model", "layer", "loss", "perplexity"] and len(rows) == 1 + 2 * 4


# --- sweep ----------------------------------------------------------------------


def sweep_cfgs():
    model = tiny(n_layers=2)
    train = TrainConfig(base_lr=3e-3, total_steps=12, batch_size=2, seq_len=16, eval_interval=6,
                        eval_windows=4, corpus_path=str(CORPUS))
    return model, train


@pytest.fixture(scope="module")
def corpus():
    return np.frombuffer(CORPUS.read_bytes()[:100_000], dtype=np.uint8)


def test_sweep_structure_and_controls(tmp_path, corpus):
    model, train = sweep_cfgs()
    gates = ["relu", "identity", "sigmoid"]
    res = ablation_sweep(model, train, gates, [0, 1], tmp_path, corpus=corpus)
    assert len(res.cells) == 6
    header = next(csv.reader(open(tmp_path / "curves.csv")))
    assert header == ["step"] + [f"{g}_seed{s}" for g in gates for s in (0, 1)]
    assert len(list(csv.reader(open(tmp_path / "curves.csv")))) == 13
    summary = res.summary()
    keys = [(r["final_val_loss"], r["gate"]) for r in summary]
    assert keys == sorted(keys) and [r["rank"] for r in summary] == [1, 2, 3]
    # identical init for the same seed: relu and identity differ only through the gate
    relu = build_model(model.replace(gate_spec="relu", seed=0))
    ident = build_model(model.replace(gate_spec="identity", seed=0))
    assert relu.digest() == ident.digest()


def test_sweep_resumes_completed_cells(tmp_path, corpus, monkeypatch):
    model, train = sweep_cfgs()
    full = ablation_sweep(model, train, ["relu", "tanh"], [0], tmp_path / "full", corpus=corpus)
    part_dir = tmp_path / "part"
    ablation_sweep(model, train, ["relu"], [0], part_dir, corpus=corpus)
    trained = []
    real_train = analysis.train

    def counting(mcfg, *a, **kw):
        trained.append(mcfg.gate_spec)
        return real_train(mcfg, *a, **kw)

    monkeypatch.setattr(analysis, "train", counting)
    again = ablation_sweep(model, train, ["relu", "tanh"], [0], part_dir, corpus=corpus)
    assert trained == ["tanh"]
    assert again.summary() == full.summary()
    for name in ("curves.csv", "summary.csv"):
        assert (part_dir / name).read_bytes() == (tmp_path / "full" / name).read_bytes()


def test_sweep_resumes_interrupted_cell(tmp_path, corpus):
    model, train = sweep_cfgs()
    full = ablation_sweep(model, train, ["relu"], [0], tmp_path / "full", corpus=corpus)
    from satlab.training import train as run

    cell = tmp_path / "part" / "cells" / "relu_seed0"
    run(model.replace(gate_spec="relu", seed=0), train.replace(seed=0), corpus=corpus, out_dir=cell, stop_at=5)
    again = ablation_sweep(model, train, ["relu"], [0], tmp_path / "part", corpus=corpus)
    assert again.cells[0].metrics.rows == full.cells[0].metrics.rows


def test_gate_stats_dataclass_roundtrip():
    s = GateStats(np.ones((2, 3)), np.zeros(2), np.zeros(2), 6)
    d = s.to_dict()
    assert d["layers"] == [2, 3] and d["mean_alpha"] == [[1.0] * 3] * 2
