"""Per-cluster geometric feature extraction.

Each cluster is embedded by a shared per-point MLP followed by a
columnwise max over points, so the embedding is exactly invariant to
point order and duplication.  Points are expressed in cluster-centered
coordinates before the MLP; the cluster centroid is appended to the
pooled feature so downstream attention still sees absolute pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .clustering import ClusterSet

HIDDEN1 = 64
HIDDEN2 = 128
CENTROID_DIM = 3
TOKEN_DIM = HIDDEN2 + CENTROID_DIM

DEFAULT_MAX_CLUSTER_POINTS = 512


def init_embed_params(rng: np.random.Generator) -> dict[str, Tensor]:
    p = {}
    p.update(nn.init_linear(rng, 3, HIDDEN1, "embed.l1"))
    p.update(nn.init_layer_norm(HIDDEN1, "embed.ln1"))
    p.update(nn.init_linear(rng, HIDDEN1, HIDDEN2, "embed.l2"))
    p.update(nn.init_layer_norm(HIDDEN2, "embed.ln2"))
    return p


def point_mlp(params: dict, pts: Tensor) -> Tensor:
    """Shared MLP applied to each centered point row; (P, 3) -> (P, HIDDEN2)."""
    h = ad.relu(nn.layer_norm_p(params, "embed.ln1", nn.linear(params, "embed.l1", pts)))
    return ad.relu(nn.layer_norm_p(params, "embed.ln2", nn.linear(params, "embed.l2", h)))


def canonical_cluster_points(points: np.ndarray, max_points: int,
                             rng: np.random.Generator | None) -> tuple[np.ndarray, np.ndarray]:
    """Dedupe, lexicographically sort, and cap a cluster's points.

    The canonical ordering makes the embedding (and any subsampling)
    independent of input point order; deduplication makes the centroid
    invariant to repeated points.  Returns (points, centroid).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"cluster must be a non-empty (N, 3) array, got shape {pts.shape}")
    pts = np.unique(pts, axis=0)
    if len(pts) > max_points:
        if rng is None:
            rng = np.random.default_rng(0)
        keep = np.sort(rng.choice(len(pts), size=max_points, replace=False))
        pts = pts[keep]
    return pts, pts.mean(axis=0)


def embed_cluster(points, params: dict, max_points: int = DEFAULT_MAX_CLUSTER_POINTS,
                  rng: np.random.Generator | None = None) -> Tensor:
    """Embed one cluster into a TOKEN_DIM vector (pooled shape + centroid)."""
    pts, centroid = canonical_cluster_points(points, max_points, rng)
    feats = point_mlp(params, Tensor(pts - centroid))
    pooled = ad.set_max_pool(feats)
    return ad.concat([pooled, Tensor(centroid)], axis=0)


@dataclass
class SceneTokens:
    """Fixed-width token matrix for one scene; live slots come first."""

    tokens: Tensor  # (k_max, TOKEN_DIM); masked rows are all-zero
    mask: np.ndarray  # (k_max,) bool
    cluster_ids: list[int]  # canonical cluster id per live slot

    @property
    def num_live(self) -> int:
        return int(self.mask.sum())


def select_clusters(cs: ClusterSet, k_max: int) -> list[int]:
    """Keep at most k_max clusters, largest first, result in canonical order."""
    if cs.num_clusters <= k_max:
        return list(range(cs.num_clusters))
    order = sorted(range(cs.num_clusters), key=lambda c: (-len(cs.clusters[c]), c))
    return sorted(order[:k_max])


def prepare_scene_clusters(cloud, cs: ClusterSet, k_max: int,
                           max_points: int = DEFAULT_MAX_CLUSTER_POINTS,
                           rng: np.random.Generator | None = None):
    """Canonicalized per-cluster (centered points, centroid) for kept clusters."""
    cloud = np.asarray(cloud, dtype=np.float64)
    kept = select_clusters(cs, k_max)
    prepped = []
    for cid in kept:
        pts, centroid = canonical_cluster_points(cloud[cs.clusters[cid]], max_points, rng)
        prepped.append((pts - centroid, centroid))
    return prepped, kept


def embed_packed(prepped, params: dict) -> Tensor:
    """Embed many clusters in one MLP call.

    ``prepped`` is a list of (centered_points, centroid); returns a
    (len(prepped), TOKEN_DIM) tensor, rows in input order.
    """
    starts = np.cumsum([0] + [len(p) for p, _ in prepped])
    packed = Tensor(np.vstack([p for p, _ in prepped]))
    feats = point_mlp(params, packed)
    pooled = ad.segment_max_pool(feats, starts)
    centroids = Tensor(np.array([c for _, c in prepped]))
    return ad.concat([pooled, centroids], axis=1)


def embed_scene(cs: ClusterSet, cloud, params: dict, k_max: int,
                max_points: int = DEFAULT_MAX_CLUSTER_POINTS,
                rng: np.random.Generator | None = None) -> SceneTokens:
    """All cluster tokens of one scene, padded and masked to k_max slots."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    prepped, kept = prepare_scene_clusters(cloud, cs, k_max, max_points, rng)
    mask = np.zeros(k_max, dtype=bool)
    if not kept:
        return SceneTokens(tokens=Tensor(np.zeros((k_max, TOKEN_DIM))), mask=mask, cluster_ids=[])
    live = embed_packed(prepped, params)
    tokens = ad.scatter_rows(live, np.arange(len(kept)), k_max)
    mask[: len(kept)] = True
    return SceneTokens(tokens=tokens, mask=mask, cluster_ids=kept)
