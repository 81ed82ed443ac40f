"""Causal grouped-query attention with first-layer value mixing.

Three value paths share one attention kernel:

* ``transformer`` uses the layer's own values.
* ``resformer`` mixes in the first layer's values with layer-global scalars,
  ``V' = lambda1 * V1 + lambda2 * V``.
* ``satformer`` mixes them in with a per-token, per-KV-head gate computed
  from the layer's normalized input, ``V' = V + alpha * V1``.

Layer 1 is the source of ``V1`` and is never mixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from satlab.autodiff import ShapeError, Tensor, ew_unary, rope_apply, softmax_lastdim
from satlab.autodiff import sum as tsum
from satlab.config import GATE_SPECS, ModelConfig

ROPE_THETA = 10000.0


@dataclass
class AttentionWeights:
    wq: Tensor  # [d_model, n_heads * d_head]
    wk: Tensor  # [d_model, n_kv * d_head]
    wv: Tensor  # [d_model, n_kv * d_head]
    wo: Tensor  # [n_heads * d_head, d_model]
    w_alpha: Optional[Tensor] = None  # [d_model, n_kv], satformer layers > 1 only


@dataclass
class ResLambdas:
    """Learnable ResFormer mixing scalars.

    ``logits`` holds one raw logit per consuming layer (layers 2..L). The
    normalization also includes a fixed zero logit standing for layer 1, so
    with all logits at zero every ``lambda1`` equals ``scale / L = 1``.
    """

    logits: Tensor  # [n_layers - 1]
    lambda2: Tensor  # [1], shared by all layers
    scale: float  # fixed at n_layers

    def lambda1(self) -> Tensor:
        z = self.logits
        m = max(0.0, float(z.data.max()))
        e = ew_unary("exp", z - m)
        denom = tsum(e) + math.exp(-m)
        return e * self.scale / denom

    def weights(self) -> np.ndarray:
        """Normalized softmax weights over all L layers (layer 1 first); sums to 1."""
        z = np.concatenate([[0.0], self.logits.data.astype(np.float64)])
        e = np.exp(z - z.max())
        return e / e.sum()

    def lambda1_values(self) -> np.ndarray:
        return self.scale * self.weights()[1:]


def compute_gate(x_norm: Tensor, w_alpha: Tensor, spec: str) -> Tensor:
    """Gate activations alpha [B, T, N_kv] from the normalized hidden state."""
    if spec not in GATE_SPECS:
        raise ValueError(f"unknown gate spec {spec!r}; expected one of {GATE_SPECS}")
    logits = x_norm @ w_alpha
    n_kv = w_alpha.shape[-1]
    if spec in ("relu", "sigmoid", "tanh", "identity"):
        return ew_unary(spec, logits)
    share = softmax_lastdim(logits)
    if spec == "softmax":
        return share * float(n_kv)
    return share * ew_unary("sigmoid", logits) * float(n_kv)


def mix_values_sat(v_n: Tensor, v_1: Tensor, alpha: Tensor) -> Tensor:
    if v_n.shape != v_1.shape:
        raise ShapeError(f"value shapes differ: {v_n.shape} vs first-layer {v_1.shape}")
    if alpha.shape != v_n.shape[:-1]:
        raise ShapeError(f"gate shape {alpha.shape} does not match values {v_n.shape[:-1]}")
    return v_n + alpha.reshape(alpha.shape + (1,)) * v_1


def res_mix(v_n: Tensor, v_1: Tensor, lambda1, lambda2) -> Tensor:
    """Layer-global mixing ``lambda1 * V1 + lambda2 * V`` with given coefficients."""
    if v_n.shape != v_1.shape:
        raise ShapeError(f"value shapes differ: {v_n.shape} vs first-layer {v_1.shape}")
    return v_1 * lambda1 + v_n * lambda2


def mix_values_res(v_n: Tensor, v_1: Tensor, lambdas: ResLambdas, layer: int,
                   lambda1: Optional[Tensor] = None) -> Tensor:
    """ResFormer value mixing at ``layer`` (1-based, must be > 1).

    ``lambda1`` may carry a precomputed vector from ``lambdas.lambda1()`` so a
    full forward normalizes once.
    """
    if layer < 2:
        raise ValueError("ResFormer mixing is defined for layers > 1 only")
    lam = lambdas.lambda1() if lambda1 is None else lambda1
    return res_mix(v_n, v_1, lam[layer - 2], lambdas.lambda2)


def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a causal mask and grouped KV heads.

    q is [B, T, H, d], k and v are [B, T, N_kv, d]. Query head h reads KV
    head h // (H / N_kv). Returns [B, T, H * d].
    """
    B, T, H, d = q.shape
    n_kv = k.shape[2]
    if k.shape != v.shape or k.shape[:2] != (B, T) or k.shape[3] != d:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    if H % n_kv:
        raise ShapeError(f"{H} query heads cannot be grouped over {n_kv} KV heads")
    G = H // n_kv
    qh = (q * (1.0 / math.sqrt(d))).reshape(B, T, n_kv, G, d).transpose(0, 2, 3, 1, 4)
    kh = k.transpose(0, 2, 3, 1).reshape(B, n_kv, 1, d, T)
    vh = v.transpose(0, 2, 1, 3).reshape(B, n_kv, 1, T, d)
    mask = np.tril(np.ones((T, T), dtype=bool))
    p = softmax_lastdim(qh @ kh, mask=mask)
    out = p @ vh  # [B, n_kv, G, T, d]
    return out.transpose(0, 3, 1, 2, 4).reshape(B, T, H * d)


def attention_layer_forward(
    x_norm: Tensor,
    weights: AttentionWeights,
    v_1: Optional[Tensor],
    cfg: ModelConfig,
    layer: int,
    lambdas: Optional[ResLambdas] = None,
    lambda1: Optional[Tensor] = None,
    gate_override=None,
):
    """One attention sublayer on an already-normalized input.

    Returns ``(y, v_base, alpha)``: the output after the output projection,
    this layer's raw (unmixed, unrotated) values, and the gate actually used
    (``None`` unless the layer is gated). ``gate_override`` replaces the
    computed gate with a constant broadcastable to [B, T, N_kv].
    """
    B, T, _ = x_norm.shape
    H, n_kv, d = cfg.n_heads, cfg.n_kv_heads, cfg.d_head
    if (v_1 is None) != (layer == 1):
        raise ValueError(f"layer {layer}: first-layer values must be given exactly when layer > 1")
    gated = cfg.variant == "satformer" and layer > 1
    if gated != (weights.w_alpha is not None):
        raise ValueError(f"layer {layer}: gate weights do not match variant {cfg.variant!r}")
    if cfg.variant == "resformer" and layer > 1 and lambdas is None:
        raise ValueError("resformer layers need their mixing lambdas")

    pos = np.arange(T)
    q = rope_apply((x_norm @ weights.wq).reshape(B, T, H, d), pos, ROPE_THETA)
    k = rope_apply((x_norm @ weights.wk).reshape(B, T, n_kv, d), pos, ROPE_THETA)
    v = (x_norm @ weights.wv).reshape(B, T, n_kv, d)
    if v_1 is not None and v_1.shape != v.shape:
        raise ShapeError(f"first-layer values {v_1.shape} do not match layer values {v.shape}")

    alpha = None
    if layer == 1 or cfg.variant == "transformer":
        v_mix = v
    elif cfg.variant == "resformer":
        v_mix = mix_values_res(v, v_1, lambdas, layer, lambda1)
    else:
        alpha = compute_gate(x_norm, weights.w_alpha, cfg.gate_spec)
        if gate_override is not None:
            fixed = np.broadcast_to(np.asarray(gate_override, dtype=v.dtype), alpha.shape)
            alpha = Tensor(np.array(fixed))
        v_mix = mix_values_sat(v, v_1, alpha)

    y = causal_attention(q, k, v_mix) @ weights.wo
    return y, v, alpha
