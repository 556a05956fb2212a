"""Fusing dual-arm joint state with relational visual features.

Each arm's joint vector is embedded by a shared MLP, then an arm-specific
embedding is added so identical joint configurations still produce
distinct queries.  The two queries cross-attend over cluster features;
the head-averaged attention weights double as a per-cluster relevance
diagnostic that can be splatted back onto the point cloud.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .clustering import ClusterSet
from .encoder import RelationalFeatures

ARMS = ("L", "R")


def init_fusion_params(rng: np.random.Generator, d_vision: int, width: int = 128,
                       heads: int = 4) -> dict[str, Tensor]:
    if width % heads != 0:
        raise ValueError(f"fusion width {width} not divisible by heads {heads}")
    p = {}
    p.update(nn.init_linear(rng, 7, width, "fuse.s1"))
    p.update(nn.init_layer_norm(width, "fuse.sln"))
    p.update(nn.init_linear(rng, width, width, "fuse.s2"))
    p["fuse.arm_embed"] = nn.init_uniform(rng, (2, width), width, "fuse.arm_embed")
    if not np.any(p["fuse.arm_embed"].data[0] != p["fuse.arm_embed"].data[1]):
        raise ValueError("arm embeddings initialized identical; reseed")
    p.update(nn.init_attention(rng, width, d_vision, width, "fuse.attn"))
    return p


def embed_state_batch(joints: np.ndarray, params: dict) -> Tensor:
    """(B, 2, 7) joint angles -> (B, 2, width) arm queries."""
    joints = np.asarray(joints, dtype=np.float64)
    b = joints.shape[0]
    flat = Tensor(joints.reshape(b * 2, 7))
    h = ad.relu(nn.layer_norm_p(params, "fuse.sln", nn.linear(params, "fuse.s1", flat)))
    h = nn.linear(params, "fuse.s2", h)
    width = h.shape[-1]
    emb = ad.reshape(h, (b, 2, width))
    return ad.add(emb, ad.reshape(params["fuse.arm_embed"], (1, 2, width)))


def embed_state(joints: np.ndarray, params: dict) -> Tensor:
    """(2, 7) joint angles -> (2, width) queries for one observation."""
    out = embed_state_batch(np.asarray(joints)[None], params)
    return ad.reshape(out, (out.shape[1], out.shape[2]))


@dataclass
class FusedCondition:
    fc: Tensor  # (2, width) fused features, one row per arm
    alpha: np.ndarray  # (2, k_max) head-averaged attention weights
    cluster_ids: list[int]  # token slot -> canonical cluster id
    slot: int = 0  # history slot the condition belongs to


def cross_attend_batch(queries: Tensor, vision: Tensor, mask: np.ndarray,
                       params: dict, heads: int = 4):
    """Arm queries over cluster features; returns (fc, alpha) batched."""
    out, weights = nn.multi_head_attention(params, "fuse.attn", queries, vision, mask, heads)
    return ad.add(queries, out), weights


def cross_attend(queries: Tensor, vision: RelationalFeatures, params: dict,
                 heads: int = 4, cluster_ids: list[int] | None = None,
                 slot: int = 0) -> FusedCondition:
    """Fuse one observation's arm queries with its cluster features."""
    mask = np.asarray(vision.mask, dtype=bool)
    if not mask.any():
        raise ValueError("cross attention requires at least one live cluster")
    k, d = vision.features.shape
    q = ad.reshape(queries, (1,) + tuple(queries.shape))
    feats = ad.reshape(vision.features, (1, k, d))
    fc, weights = cross_attend_batch(q, feats, mask[None, :], params, heads)
    return FusedCondition(
        fc=ad.reshape(fc, (2, fc.shape[-1])),
        alpha=weights[0],
        cluster_ids=list(cluster_ids) if cluster_ids is not None else list(range(int(mask.sum()))),
        slot=slot,
    )


def export_attention_map(cond: FusedCondition, cs: ClusterSet, cloud) -> np.ndarray:
    """Per-point attention weights per arm; noise and dropped clusters get 0.

    Returns (2, N): row 0 for the left arm, row 1 for the right.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if len(cs.labels) != len(cloud):
        raise ValueError(
            f"cluster set covers {len(cs.labels)} points but cloud has {len(cloud)}")
    if len(cond.cluster_ids) > len(cond.alpha[0]):
        raise ValueError("attention weights narrower than the cluster slots")
    weights = np.zeros((2, len(cloud)))
    for slot, cid in enumerate(cond.cluster_ids):
        if cid >= cs.num_clusters:
            raise ValueError(f"condition references cluster {cid} absent from the cluster set")
        idx = cs.clusters[cid]
        weights[0, idx] = cond.alpha[0, slot]
        weights[1, idx] = cond.alpha[1, slot]
    return weights
