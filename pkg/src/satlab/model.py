"""Decoder-only language model assembly for the three variants."""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from satlab.attention import AttentionWeights, ResLambdas, attention_layer_forward
from satlab.autodiff import Tensor, embedding_lookup, ew_unary, rms_norm
from satlab.config import ModelConfig

NORM_EPS = 1e-5
EMBED_STD = 0.02


@dataclass
class LayerWeights:
    attn_norm: Tensor
    attn: AttentionWeights
    ffn_norm: Tensor
    w_in: Tensor  # [d_model, d_ff]
    w_out: Tensor  # [d_ff, d_model]


@dataclass
class Diagnostics:
    alpha: np.ndarray  # [L-1, B, T, N_kv]; leading extent 0 for ungated variants
    hidden: np.ndarray  # [L+1, B, T, d_model]; entry 0 is the embedding output
    v1_norm: Optional[np.ndarray] = None  # [N_kv] mean L2 norm of first-layer values


class ModelWeights:
    """All learnable tensors of one model, addressable by stable names."""

    def __init__(self, config: ModelConfig, embed: Tensor, layers: list[LayerWeights],
                 final_norm: Tensor, unembed: Optional[Tensor] = None,
                 lambdas: Optional[ResLambdas] = None):
        self.config = config
        self.embed = embed
        self.layers = layers
        self.final_norm = final_norm
        self.unembed = unembed
        self.lambdas = lambdas

    @property
    def dtype(self) -> np.dtype:
        return self.embed.dtype

    def named_parameters(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for n, lw in enumerate(self.layers, start=1):
            out[f"layer{n}.attn_norm"] = lw.attn_norm
            out[f"layer{n}.wq"] = lw.attn.wq
            out[f"layer{n}.wk"] = lw.attn.wk
            out[f"layer{n}.wv"] = lw.attn.wv
            out[f"layer{n}.wo"] = lw.attn.wo
            if lw.attn.w_alpha is not None:
                out[f"layer{n}.w_alpha"] = lw.attn.w_alpha
            out[f"layer{n}.ffn_norm"] = lw.ffn_norm
            out[f"layer{n}.w_in"] = lw.w_in
            out[f"layer{n}.w_out"] = lw.w_out
        out["final_norm"] = self.final_norm
        if self.unembed is not None:
            out["unembed"] = self.unembed
        if self.lambdas is not None:
            out["res.lambda_logits"] = self.lambdas.logits
            out["res.lambda2"] = self.lambdas.lambda2
        return out

    def num_params(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def unembedding(self) -> Tensor:
        return self.embed.transpose() if self.unembed is None else self.unembed

    def copy(self) -> "ModelWeights":
        return from_arrays(self.config, {k: v.data for k, v in self.named_parameters().items()})

    def astype(self, dtype) -> "ModelWeights":
        arrays = {k: v.data.astype(dtype) for k, v in self.named_parameters().items()}
        return from_arrays(self.config, arrays)

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def param_family(name: str) -> str:
    return name.split(".")[-1]


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices except the gate projections."""
    fam = param_family(name)
    return not (fam.endswith("norm") or fam == "w_alpha" or name.startswith("res."))


# ---------------------------------------------------------------------------
# construction


def _shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, dh = cfg.d_model, cfg.d_head
    shapes: dict[str, tuple] = {"embed": (cfg.vocab_size, d)}
    for n in range(1, cfg.n_layers + 1):
        shapes[f"layer{n}.attn_norm"] = (d,)
        shapes[f"layer{n}.wq"] = (d, cfg.n_heads * dh)
        shapes[f"layer{n}.wk"] = (d, cfg.n_kv_heads * dh)
        shapes[f"layer{n}.wv"] = (d, cfg.n_kv_heads * dh)
        shapes[f"layer{n}.wo"] = (cfg.n_heads * dh, d)
        if cfg.variant == "satformer" and n > 1:
            shapes[f"layer{n}.w_alpha"] = (d, cfg.n_kv_heads)
        shapes[f"layer{n}.ffn_norm"] = (d,)
        shapes[f"layer{n}.w_in"] = (d, cfg.d_ff)
        shapes[f"layer{n}.w_out"] = (cfg.d_ff, d)
    shapes["final_norm"] = (d,)
    if not cfg.tie_embeddings:
        shapes["unembed"] = (d, cfg.vocab_size)
    if cfg.variant == "resformer":
        shapes["res.lambda_logits"] = (cfg.n_layers - 1,)
        shapes["res.lambda2"] = (1,)
    return shapes


def _init_array(name: str, shape: tuple, seed: int) -> np.ndarray:
    # one stream per parameter name: shared tensors are identical across variants
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    fam = param_family(name)
    if fam.endswith("norm") or fam == "lambda2":
        return np.ones(shape)
    if fam == "lambda_logits":
        return np.zeros(shape)
    if fam == "embed":
        return rng.normal(0.0, EMBED_STD, size=shape)
    bound = 1.0 / np.sqrt(shape[0])
    return rng.uniform(-bound, bound, size=shape)


def from_arrays(cfg: ModelConfig, arrays: Mapping[str, np.ndarray]) -> ModelWeights:
    """Assemble weights from named arrays (copied), checking names and shapes."""
    shapes = _shapes(cfg)
    missing = sorted(set(shapes) - set(arrays))
    extra = sorted(set(arrays) - set(shapes))
    if missing or extra:
        raise ValueError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    t = {}
    for name, shape in shapes.items():
        arr = np.array(arrays[name], copy=True)
        if arr.shape != shape:
            raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
        t[name] = Tensor(arr, requires_grad=True, name=name)
    layers = []
    for n in range(1, cfg.n_layers + 1):
        attn = AttentionWeights(
            wq=t[f"layer{n}.wq"], wk=t[f"layer{n}.wk"], wv=t[f"layer{n}.wv"],
            wo=t[f"layer{n}.wo"], w_alpha=t.get(f"layer{n}.w_alpha"),
        )
        layers.append(LayerWeights(t[f"layer{n}.attn_norm"], attn, t[f"layer{n}.ffn_norm"],
                                   t[f"layer{n}.w_in"], t[f"layer{n}.w_out"]))
    lambdas = None
    if cfg.variant == "resformer":
        lambdas = ResLambdas(t["res.lambda_logits"], t["res.lambda2"], float(cfg.n_layers))
    return ModelWeights(cfg, t["embed"], layers, t["final_norm"], t.get("unembed"), lambdas)


def build_model(config: ModelConfig, seed: Optional[int] = None, dtype=np.float32) -> ModelWeights:
    """Initialize weights deterministically from ``seed`` (defaults to ``config.seed``).

    Linear maps are uniform in +-1/sqrt(fan_in), norm scales are 1, the
    embedding is N(0, 0.02^2), and ResFormer lambdas start at their unit
    initialization.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    arrays = {name: _init_array(name, shape, seed).astype(dtype)
              for name, shape in _shapes(config).items()}
    return from_arrays(config, arrays)


def count_params(config: ModelConfig) -> int:
    """Closed-form parameter count.

    embedding V*d; per layer two norm scales 2d, attention
    d*(H*dh) + 2*d*(Nkv*dh) + (H*dh)*d, FFN 2*d*d_ff; gate d*Nkv on each of
    layers 2..L (satformer); final norm d; untied unembedding d*V;
    ResFormer adds L-1 logits and one shared lambda2.
    """
    config.validate()
    d, dh, H, nkv, L = config.d_model, config.d_head, config.n_heads, config.n_kv_heads, config.n_layers
    per_layer = 2 * d + d * H * dh + 2 * d * nkv * dh + H * dh * d + 2 * d * config.d_ff
    total = config.vocab_size * d + L * per_layer + d
    if not config.tie_embeddings:
        total += d * config.vocab_size
    if config.variant == "satformer":
        total += (L - 1) * d * nkv
    if config.variant == "resformer":
        total += (L - 1) + 1
    return total


# ---------------------------------------------------------------------------
# forward


def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [batch, time], got shape {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {cfg.max_seq_len}")
    return tokens


def decode(weights: ModelWeights, hidden: Tensor) -> Tensor:
    """Final norm followed by the unembedding."""
    return rms_norm(hidden, weights.final_norm, NORM_EPS) @ weights.unembedding()


def _run(weights: ModelWeights, tokens, capture: bool, gate_override: Optional[Mapping[int, object]]):
    cfg = weights.config
    tokens = _check_tokens(cfg, tokens)
    x = embedding_lookup(weights.embed, tokens)
    hidden = [x.data] if capture else None
    alphas = []
    v1 = None
    lam1 = weights.lambdas.lambda1() if weights.lambdas is not None else None
    for n, lw in enumerate(weights.layers, start=1):
        h = rms_norm(x, lw.attn_norm, NORM_EPS)
        override = gate_override.get(n) if gate_override else None
        y, v_base, alpha = attention_layer_forward(
            h, lw.attn, v1, cfg, n, weights.lambdas, lam1, override
        )
        if n == 1:
            v1 = v_base
        if alpha is not None:
            alphas.append(alpha.data)
        x = x + y
        h = rms_norm(x, lw.ffn_norm, NORM_EPS)
        x = x + ew_unary("gelu", h @ lw.w_in) @ lw.w_out
        if capture:
            hidden.append(x.data)
    logits = decode(weights, x)
    if not capture:
        return logits, None
    B, T = tokens.shape
    alpha_arr = np.stack(alphas) if alphas else np.empty((0, B, T, cfg.n_kv_heads), dtype=weights.dtype)
    v1n = np.sqrt((v1.data.astype(np.float64) ** 2).sum(-1)).mean(axis=(0, 1))
    return logits, Diagnostics(alpha=alpha_arr, hidden=np.stack(hidden), v1_norm=v1n)


def forward(weights: ModelWeights, tokens, gate_override: Optional[Mapping[int, object]] = None) -> Tensor:
    """Logits [B, T, vocab]. ``gate_override`` maps a 1-based layer to a fixed gate."""
    return _run(weights, tokens, False, gate_override)[0]


def forward_with_diagnostics(weights: ModelWeights, tokens,
                             gate_override: Optional[Mapping[int, object]] = None):
    return _run(weights, tokens, True, gate_override)
