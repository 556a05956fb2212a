"""Density-based segmentation of 3D point clouds into object clusters.

Points are labeled core, border, or noise from closed epsilon-ball
neighbour counts; clusters are maximal density-connected groups of core
points plus their reachable border points.  Cluster ids are canonical
(sorted by cluster centroid), so the labeling is independent of input
point order.  ``reference_segment`` is a brute-force O(N^2) oracle kept
deliberately separate from the grid-accelerated ``segment``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

CORE = 0
BORDER = 1
NOISE = 2

NOISE_LABEL = -1


@dataclass(frozen=True)
class DbscanParams:
    """Clustering parameters: ball radius, density floor, noise threshold."""

    eps: float
    min_pts: int
    noise_threshold: float = 0.1

    def __post_init__(self):
        if not (self.eps > 0):
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be >= 1, got {self.min_pts}")
        if not (0.0 <= self.noise_threshold <= 1.0):
            raise ValueError(f"noise_threshold must lie in [0,1], got {self.noise_threshold}")


@dataclass
class ClusterSet:
    """Partition of a cloud: per-point labels plus per-cluster index lists."""

    labels: np.ndarray  # (N,) int64; -1 for noise, else canonical cluster id
    point_kind: np.ndarray  # (N,) int8 in {CORE, BORDER, NOISE}
    clusters: list[np.ndarray] = field(default_factory=list)  # sorted indices per cluster

    @property
    def num_clusters(self) -> int:
        return len(self.clusters)

    def sizes(self) -> list[int]:
        return [len(c) for c in self.clusters]


def _validate_cloud(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        return pts.reshape(0, 3)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"point cloud must be (N, 3), got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains non-finite coordinates")
    return pts


def _canonicalize(pts: np.ndarray, members: list[list[int]], kind: np.ndarray) -> ClusterSet:
    """Assign final cluster ids by full-cluster centroid lexicographic order."""
    n = len(pts)
    keyed = []
    for m in members:
        idx = np.sort(np.asarray(m, dtype=np.int64))
        centroid = pts[idx].mean(axis=0)
        # secondary key (min member coordinate) only matters for exactly
        # coincident centroids; keeps ordering permutation-independent
        lowest = pts[idx][np.lexsort((pts[idx][:, 2], pts[idx][:, 1], pts[idx][:, 0]))][0]
        keyed.append((tuple(centroid), tuple(lowest), idx))
    keyed.sort(key=lambda t: (t[0], t[1]))
    labels = np.full(n, NOISE_LABEL, dtype=np.int64)
    clusters = []
    for cid, (_, _, idx) in enumerate(keyed):
        labels[idx] = cid
        clusters.append(idx)
    return ClusterSet(labels=labels, point_kind=kind, clusters=clusters)


def _assemble(pts: np.ndarray, core_mask: np.ndarray, comp_of_core: dict[int, int],
              ncomp: int, border_neighbors) -> ClusterSet:
    """Common second phase: order components, attach borders, canonicalize.

    ``border_neighbors(i)`` must return (core_indices, squared_distances)
    for the non-core point i, covering every core within eps.
    """
    n = len(pts)
    kind = np.full(n, NOISE, dtype=np.int8)
    kind[core_mask] = CORE

    members: list[list[int]] = [[] for _ in range(ncomp)]
    for i in np.flatnonzero(core_mask):
        members[comp_of_core[i]].append(i)

    # provisional order for border tie-breaking: core-only centroid, lex
    prov_key = []
    for m in members:
        idx = np.asarray(m)
        centroid = pts[idx].mean(axis=0)
        lowest = pts[idx][np.lexsort((pts[idx][:, 2], pts[idx][:, 1], pts[idx][:, 0]))][0]
        prov_key.append((tuple(centroid), tuple(lowest)))
    rank_to_comp = sorted(range(ncomp), key=lambda c: prov_key[c])
    prov_rank = {comp: rank for rank, comp in enumerate(rank_to_comp)}

    for i in np.flatnonzero(~core_mask):
        cores, d2 = border_neighbors(i)
        if len(cores) == 0:
            continue
        best = None
        for c, dd in zip(cores, d2):
            cand = (dd, prov_rank[comp_of_core[int(c)]])
            if best is None or cand < best:
                best = cand
        members[rank_to_comp[best[1]]].append(i)
        kind[i] = BORDER

    return _canonicalize(pts, members, kind)


def segment(points, params: DbscanParams) -> ClusterSet:
    """Cluster a cloud with grid-accelerated neighbourhood queries."""
    pts = _validate_cloud(points)
    n = len(pts)
    if n == 0:
        return ClusterSet(labels=np.zeros(0, dtype=np.int64),
                          point_kind=np.zeros(0, dtype=np.int8), clusters=[])
    eps = params.eps
    eps2 = eps * eps

    cells: dict[tuple[int, int, int], list[int]] = {}
    keys = np.floor(pts / eps).astype(np.int64)
    for i, key in enumerate(map(tuple, keys)):
        cells.setdefault(key, []).append(i)

    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]

    def neighbors(i: int) -> np.ndarray:
        kx, ky, kz = keys[i]
        cand: list[int] = []
        for dx, dy, dz in offsets:
            cand.extend(cells.get((kx + dx, ky + dy, kz + dz), ()))
        cand = np.asarray(cand, dtype=np.int64)
        d2 = ((pts[cand] - pts[i]) ** 2).sum(axis=1)
        return cand[d2 <= eps2]

    neigh = [neighbors(i) for i in range(n)]
    core_mask = np.array([len(neigh[i]) >= params.min_pts for i in range(n)])

    comp_of_core: dict[int, int] = {}
    ncomp = 0
    for seed in np.flatnonzero(core_mask):
        if seed in comp_of_core:
            continue
        comp_of_core[seed] = ncomp
        stack = [seed]
        while stack:
            cur = stack.pop()
            for nb in neigh[cur]:
                if core_mask[nb] and nb not in comp_of_core:
                    comp_of_core[nb] = ncomp
                    stack.append(nb)
        ncomp += 1

    def border_neighbors(i: int):
        cand = neigh[i]
        cores = cand[core_mask[cand]]
        d2 = ((pts[cores] - pts[i]) ** 2).sum(axis=1)
        return cores, d2

    return _assemble(pts, core_mask, comp_of_core, ncomp, border_neighbors)


MAX_REFERENCE_POINTS = 2000


def reference_segment(points, params: DbscanParams) -> ClusterSet:
    """Brute-force oracle: full distance matrix, explicit reachability closure."""
    pts = _validate_cloud(points)
    n = len(pts)
    if n > MAX_REFERENCE_POINTS:
        raise ValueError(f"reference_segment refuses clouds above {MAX_REFERENCE_POINTS} points (got {n})")
    if n == 0:
        return ClusterSet(labels=np.zeros(0, dtype=np.int64),
                          point_kind=np.zeros(0, dtype=np.int8), clusters=[])

    diff = pts[:, None, :] - pts[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    within = d2 <= params.eps ** 2
    core_mask = within.sum(axis=1) >= params.min_pts

    # transitive closure of density connectivity over core points
    comp_of_core: dict[int, int] = {}
    ncomp = 0
    core_idx = np.flatnonzero(core_mask)
    for seed in core_idx:
        if seed in comp_of_core:
            continue
        frontier = {seed}
        comp_of_core[seed] = ncomp
        while frontier:
            cur = frontier.pop()
            for nb in core_idx[within[cur, core_idx]]:
                if nb not in comp_of_core:
                    comp_of_core[nb] = ncomp
                    frontier.add(nb)
        ncomp += 1

    def border_neighbors(i: int):
        cores = np.flatnonzero(within[i] & core_mask)
        return cores, d2[i, cores]

    return _assemble(pts, core_mask, comp_of_core, ncomp, border_neighbors)


def stability_score(cs: ClusterSet, params: DbscanParams) -> list[float]:
    """Per-cluster score: core-point count minus size times the noise threshold."""
    scores = []
    for idx in cs.clusters:
        n_core = int((cs.point_kind[idx] == CORE).sum())
        scores.append(n_core - len(idx) * params.noise_threshold)
    return scores


def select_eps_by_stability(points, candidates, min_pts: int,
                            noise_threshold: float) -> tuple[float, ClusterSet]:
    """Sweep candidate radii and keep the one maximizing total stability.

    Ties go to the smaller radius.  This sweep is an optional diagnostic;
    the pipeline default keeps a fixed radius across tasks.
    """
    cands = list(candidates)
    if not cands:
        raise ValueError("candidate list must be non-empty")
    best = None  # (total, eps, ClusterSet)
    for eps in cands:
        params = DbscanParams(eps=eps, min_pts=min_pts, noise_threshold=noise_threshold)
        cs = segment(points, params)
        total = float(sum(stability_score(cs, params)))
        if best is None or total > best[0] or (total == best[0] and eps < best[1]):
            best = (total, eps, cs)
    return best[1], best[2]
