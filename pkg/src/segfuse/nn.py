"""Shared learned-layer plumbing: initialization, linears, attention."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def init_uniform(rng: np.random.Generator, shape, fan_in: int, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), trainable=True, name=name)


def init_linear(rng, d_in: int, d_out: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.w": init_uniform(rng, (d_in, d_out), d_in, f"{prefix}.w"),
        f"{prefix}.b": init_uniform(rng, (d_out,), d_in, f"{prefix}.b"),
    }


def init_layer_norm(d: int, prefix: str) -> dict[str, Tensor]:
    return {
        f"{prefix}.g": Tensor(np.ones(d), trainable=True, name=f"{prefix}.g"),
        f"{prefix}.b": Tensor(np.zeros(d), trainable=True, name=f"{prefix}.b"),
    }


def linear(params: dict, prefix: str, x: Tensor) -> Tensor:
    """Affine map over the last axis; x may be rank 2 with rows as items."""
    return ad.add(ad.matmul(x, params[f"{prefix}.w"]), params[f"{prefix}.b"])


def layer_norm_p(params: dict, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def init_attention(rng, d_q: int, d_kv: int, d_model: int, prefix: str) -> dict[str, Tensor]:
    p = {}
    p.update(init_linear(rng, d_q, d_model, f"{prefix}.wq"))
    p.update(init_linear(rng, d_kv, d_model, f"{prefix}.wk"))
    p.update(init_linear(rng, d_kv, d_model, f"{prefix}.wv"))
    p.update(init_linear(rng, d_model, d_model, f"{prefix}.wo"))
    return p


def _project_heads(params, prefix, x: Tensor, heads: int) -> Tensor:
    """(B, T, d_in) -> (B*H, T, dh) through a shared linear projection."""
    b, t, d_in = x.shape
    flat = ad.reshape(x, (b * t, d_in))
    proj = linear(params, prefix, flat)
    d_model = proj.shape[-1]
    dh = d_model // heads
    return ad.reshape(
        ad.transpose(ad.reshape(proj, (b, t, heads, dh)), (0, 2, 1, 3)),
        (b * heads, t, dh),
    )


def multi_head_attention(params: dict, prefix: str, query: Tensor, keyval: Tensor,
                         key_mask: np.ndarray, heads: int):
    """Masked scaled dot-product attention.

    query: (B, Tq, d_q); keyval: (B, Tk, d_kv); key_mask: (B, Tk) bools.
    Masked keys get an additive -1e30 logit, which underflows to an exact
    zero weight after the max-subtracted softmax.
    Returns (output (B, Tq, d_model), head-averaged weights (B, Tq, Tk)).
    """
    b, tq, _ = query.shape
    tk = keyval.shape[1]
    q = _project_heads(params, f"{prefix}.wq", query, heads)
    k = _project_heads(params, f"{prefix}.wk", keyval, heads)
    v = _project_heads(params, f"{prefix}.wv", keyval, heads)
    dh = q.shape[-1]

    logits = ad.mul(ad.bmatmul(q, ad.transpose(k, (0, 2, 1))), Tensor(1.0 / np.sqrt(dh)))
    bias = np.where(np.asarray(key_mask, dtype=bool), 0.0, -1e30)
    bias = np.repeat(bias[:, None, None, :], heads, axis=1).reshape(b * heads, 1, tk)
    attn = ad.softmax_last(ad.add(logits, Tensor(bias)))

    ctx = ad.bmatmul(attn, v)  # (B*H, Tq, dh)
    merged = ad.reshape(
        ad.transpose(ad.reshape(ctx, (b, heads, tq, dh)), (0, 2, 1, 3)),
        (b * tq, heads * dh),
    )
    out = ad.reshape(linear(params, f"{prefix}.wo", merged), (b, tq, heads * dh))
    head_mean = attn.data.reshape(b, heads, tq, tk).mean(axis=1)
    return out, head_mean


def sinusoidal_embedding(steps: np.ndarray, dim: int, max_period: float = 1e4) -> np.ndarray:
    """Classic sin/cos embedding of integer diffusion steps; (B, dim)."""
    steps = np.asarray(steps, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = steps[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)
