import numpy as np
import pytest

from satlab.autodiff import Tensor, Trace, cross_entropy_mean
from satlab.config import DESK, SMALL, ConfigError, ModelConfig
from satlab.model import (
    build_model,
    count_params,
    decode,
    forward,
    forward_with_diagnostics,
    from_arrays,
    is_decayed,
)

RNG = np.random.default_rng(11)


def tiny(variant, **kw):
    base = dict(variant=variant, d_model=16, n_layers=3, n_heads=4, n_kv_heads=2, d_ff=32,
                vocab_size=40, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


def tokens(cfg, b=2, t=7, seed=0):
    return np.random.default_rng(seed).integers(0, cfg.vocab_size, size=(b, t))


def shared(src, dst_cfg):
    """Weights for ``dst_cfg`` copied from ``src`` where names coincide, variant extras kept."""
    own = build_model(dst_cfg, dtype=src.dtype).named_parameters()
    arrays = {k: v.data for k, v in own.items()}
    for k, v in src.named_parameters().items():
        if k in arrays:
            arrays[k] = v.data
    return from_arrays(dst_cfg, arrays)


# --- construction and counting --------------------------------------------------


@pytest.mark.parametrize("variant", ["transformer", "resformer", "satformer"])
@pytest.mark.parametrize("base", [DESK, tiny("satformer"), tiny("satformer", tie_embeddings=False)])
def test_count_params_matches_built(variant, base):
    cfg = base.replace(variant=variant)
    assert count_params(cfg) == build_model(cfg).num_params()


def test_param_deltas():
    for base in (DESK, SMALL):
        L, d, nkv = base.n_layers, base.d_model, base.n_kv_heads
        tr = count_params(base.replace(variant="transformer"))
        assert count_params(base.replace(variant="satformer")) - tr == (L - 1) * d * nkv
        assert count_params(base.replace(variant="resformer")) - tr == (L - 1) + 1
    assert count_params(SMALL) - count_params(SMALL.replace(variant="transformer")) == 92160
    untied = DESK.replace(tie_embeddings=False)
    assert count_params(untied) - count_params(DESK) == DESK.vocab_size * DESK.d_model


def test_desk_counts_frozen():
    # desk shapes: 256*64 embedding, 6 layers of 2*64 + 4*64*64 + 2*64*256, final norm 64
    assert count_params(DESK.replace(variant="transformer")) == 312128
    assert count_params(DESK.replace(variant="resformer")) == 312134
    assert count_params(DESK) == 313408


def test_build_deterministic_and_shared_across_variants():
    a, b = build_model(DESK), build_model(DESK)
    assert a.digest() == b.digest()
    tr = build_model(DESK.replace(variant="transformer")).named_parameters()
    for name, p in a.named_parameters().items():
        if name in tr:
            assert np.array_equal(p.data, tr[name].data)
    assert build_model(DESK, seed=1).digest() != a.digest()


def test_init_rules():
    w = build_model(DESK).named_parameters()
    assert np.all(w["layer1.attn_norm"].data == 1)
    bound = 1 / np.sqrt(64)
    assert np.abs(w["layer2.w_alpha"].data).max() <= bound
    assert abs(w["embed"].data.std() - 0.02) < 0.002
    res = build_model(DESK.replace(variant="resformer"))
    assert np.allclose(res.lambdas.lambda1().data, 1.0, atol=1e-6)
    assert res.lambdas.lambda2.data[0] == 1.0
    assert "layer1.w_alpha" not in w


def test_decay_exclusions():
    assert is_decayed("layer2.wq") and is_decayed("embed") and is_decayed("unembed")
    for name in ("layer2.w_alpha", "layer1.attn_norm", "final_norm", "res.lambda_logits", "res.lambda2"):
        assert not is_decayed(name)


def test_invalid_config_reports_fields():
    with pytest.raises(ConfigError) as err:
        build_model(ModelConfig(variant="gpt", d_model=30, n_heads=4, n_layers=1))
    text = str(err.value)
    assert "variant" in text and "d_model" in text and "n_layers" in text


def test_from_arrays_rejects_mismatch():
    arrays = {k: v.data for k, v in build_model(tiny("satformer")).named_parameters().items()}
    arrays.pop("layer2.w_alpha")
    with pytest.raises(ValueError, match="w_alpha"):
        from_arrays(tiny("satformer"), arrays)


# --- forward --------------------------------------------------------------------


def test_forward_shapes_and_errors():
    cfg = tiny("satformer")
    w = build_model(cfg)
    assert forward(w, tokens(cfg)).shape == (2, 7, cfg.vocab_size)
    with pytest.raises(ValueError):
        forward(w, tokens(cfg, t=13))
    with pytest.raises(IndexError):
        forward(w, np.array([[0, cfg.vocab_size]]))


def test_closed_gate_model_equals_transformer():
    sat_cfg = tiny("satformer")
    sat = build_model(sat_cfg, dtype=np.float64)
    for lw in sat.layers[1:]:
        lw.attn.w_alpha.data[...] = 0.0
    tr = shared(sat, tiny("transformer"))
    x = tokens(sat_cfg)
    assert np.abs(forward(sat, x).data - forward(tr, x).data).max() < 1e-12


def test_zeroed_output_projections_leave_residual_identity_path():
    x = tokens(tiny("transformer"))
    outs = []
    for variant in ("transformer", "resformer", "satformer"):
        w = build_model(tiny(variant, n_layers=2), dtype=np.float64)
        for lw in w.layers:
            lw.attn.wo.data[...] = 0.0
            lw.w_out.data[...] = 0.0
        outs.append(forward(w, x).data)
        embedded = Tensor(w.embed.data[x])
        assert np.abs(outs[-1] - decode(w, embedded).data).max() < 1e-12
    assert np.array_equal(outs[0], outs[1]) and np.array_equal(outs[0], outs[2])


def test_batch_permutation():
    cfg = tiny("satformer")
    w = build_model(cfg)
    x = tokens(cfg, b=4)
    perm = np.array([2, 0, 3, 1])
    assert np.array_equal(forward(w, x).data[perm], forward(w, x[perm]).data)


@pytest.mark.parametrize("variant", ["transformer", "resformer", "satformer"])
def test_full_stack_causality(variant):
    cfg = tiny(variant)
    w = build_model(cfg)
    x = tokens(cfg, b=1, t=10)
    base = forward(w, x).data
    for t in range(1, 10):
        y = x.copy()
        y[0, t] = (y[0, t] + 1) % cfg.vocab_size
        assert np.abs(forward(w, y).data[0, :t] - base[0, :t]).max() <= 1e-6


def test_diagnostics():
    cfg = tiny("satformer")
    w = build_model(cfg)
    x = tokens(cfg)
    logits, diags = forward_with_diagnostics(w, x)
    assert np.array_equal(logits.data, forward(w, x).data)
    assert diags.alpha.shape == (cfg.n_layers - 1, 2, 7, cfg.n_kv_heads) and (diags.alpha >= 0).all()
    assert diags.hidden.shape == (cfg.n_layers + 1, 2, 7, cfg.d_model)
    _, tr_diags = forward_with_diagnostics(build_model(tiny("transformer")), x)
    assert tr_diags.alpha.shape[0] == 0


def test_recorded_gate_is_the_gate_used():
    cfg = tiny("satformer")
    w = build_model(cfg, dtype=np.float64)
    x = tokens(cfg)
    logits, diags = forward_with_diagnostics(w, x)
    overrides = {n: diags.alpha[n - 2] for n in range(2, cfg.n_layers + 1)}
    assert np.array_equal(forward(w, x, gate_override=overrides).data, logits.data)


def test_gate_override_is_local_to_later_layers():
    cfg = tiny("satformer", n_layers=4)
    w = build_model(cfg, dtype=np.float64)
    x = tokens(cfg)
    _, base = forward_with_diagnostics(w, x)
    _, new = forward_with_diagnostics(w, x, gate_override={3: 0.0})
    assert np.array_equal(new.alpha[0], base.alpha[0])
    assert np.array_equal(new.hidden[:3], base.hidden[:3])
    assert not new.alpha[1].any()
    assert not np.array_equal(new.hidden[3], base.hidden[3])


@pytest.mark.parametrize("variant", ["transformer", "resformer", "satformer"])
def test_every_parameter_receives_gradient(variant):
    cfg = tiny(variant)
    w = build_model(cfg, dtype=np.float64)
    x = tokens(cfg, t=8)
    with Trace() as tr:
        loss = cross_entropy_mean(forward(w, x[:, :-1]), x[:, 1:])
    tr.backward(loss)
    for name, p in w.named_parameters().items():
        assert p.grad is not None and np.abs(p.grad).sum() > 0, name


def test_astype_and_copy_are_independent():
    w = build_model(tiny("satformer"))
    c = w.copy()
    c.embed.data[0, 0] += 1
    assert c.digest() != w.digest()
    assert w.astype(np.float64).dtype == np.float64
