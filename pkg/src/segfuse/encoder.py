"""Self-attention over cluster tokens to capture inter-object structure.

Cluster tokens form an unordered set, so the encoder uses no positional
information: permuting live tokens permutes outputs identically.  Blocks
are pre-norm residual; masked slots are excluded as keys and zeroed on
output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .embedding import SceneTokens


@dataclass(frozen=True)
class EncoderConfig:
    layers: int = 2
    heads: int = 4
    width: int = 128
    ff_width: int = 256

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


def init_encoder_params(rng: np.random.Generator, d_in: int,
                        cfg: EncoderConfig) -> dict[str, Tensor]:
    p = {}
    p.update(nn.init_linear(rng, d_in, cfg.width, "enc.in"))
    for i in range(cfg.layers):
        pre = f"enc.l{i}"
        p.update(nn.init_layer_norm(cfg.width, f"{pre}.ln1"))
        p.update(nn.init_attention(rng, cfg.width, cfg.width, cfg.width, f"{pre}.attn"))
        p.update(nn.init_layer_norm(cfg.width, f"{pre}.ln2"))
        p.update(nn.init_linear(rng, cfg.width, cfg.ff_width, f"{pre}.ff1"))
        p.update(nn.init_linear(rng, cfg.ff_width, cfg.width, f"{pre}.ff2"))
    p.update(nn.init_layer_norm(cfg.width, "enc.lnf"))
    return p


@dataclass
class RelationalFeatures:
    features: Tensor  # (k_max, width) for single scenes
    mask: np.ndarray


def _apply_rowwise(params, prefix, x: Tensor) -> Tensor:
    b, t, d = x.shape
    out = nn.linear(params, prefix, ad.reshape(x, (b * t, d)))
    return ad.reshape(out, (b, t, out.shape[-1]))


def encode_batch(tokens: Tensor, mask: np.ndarray, params: dict, cfg: EncoderConfig,
                 collect_attention: list | None = None) -> Tensor:
    """Pre-norm transformer over (B, K, d_in) token batches."""
    b, k, _ = tokens.shape
    x = _apply_rowwise(params, "enc.in", tokens)
    for i in range(cfg.layers):
        pre = f"enc.l{i}"
        h = ad.layer_norm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        attn_out, weights = nn.multi_head_attention(params, f"{pre}.attn", h, h, mask, cfg.heads)
        if collect_attention is not None:
            collect_attention.append(weights)
        x = ad.add(x, attn_out)
        h = ad.layer_norm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        h = _apply_rowwise(params, f"{pre}.ff2", ad.relu(_apply_rowwise(params, f"{pre}.ff1", h)))
        x = ad.add(x, h)
    x = ad.layer_norm(x, params["enc.lnf.g"], params["enc.lnf.b"])
    live = np.asarray(mask, dtype=np.float64)[:, :, None]
    return ad.mul(x, Tensor(live))


def encode_relations(tokens: SceneTokens, params: dict, cfg: EncoderConfig,
                     collect_attention: list | None = None) -> RelationalFeatures:
    """Relational features for one scene's tokens."""
    if tokens.num_live == 0:
        raise ValueError("cannot encode a scene with no live cluster tokens")
    k, d = tokens.tokens.shape
    batched = ad.reshape(tokens.tokens, (1, k, d))
    out = encode_batch(batched, tokens.mask[None, :], params, cfg, collect_attention)
    return RelationalFeatures(features=ad.reshape(out, (k, cfg.width)), mask=tokens.mask)
