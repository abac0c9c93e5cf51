"""Pre-registered clustering protocol: DBSCAN grid, rejection rules, k-means fallback."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

NOISE = -1

PAPER_EPS_GRID = (1.15, 1.49, 1.83, 2.17, 2.29254, 2.51, 2.85, 3.19, 3.44)
PAPER_MIN_PTS = (10, 20, 30)
# Fifteen-pair preset: five epsilons spanning the printed grid at each minPts.
PRESET_15_EPS = (1.15, 1.83, 2.29254, 2.85, 3.44)

CLUSTER_CAP = 20
NOISE_THRESHOLD = 0.5
SILHOUETTE_EXACT_MAX = 5_000

DBSCAN_ACCEPTED = "DBSCAN_ACCEPTED"
HDBSCAN_ACCEPTED = "HDBSCAN_ACCEPTED"
HDBSCAN_REJECTED = "HDBSCAN_REJECTED"
KMEANS_FALLBACK = "KMEANS_FALLBACK"


@dataclass(frozen=True)
class DbscanConfig:
    epsilon: float
    min_pts: int

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.min_pts < 2:
            raise ValueError("min_pts must be >= 2")


@dataclass
class ClusterOutcome:
    labels: np.ndarray
    n_clusters: int
    noise_fraction: float
    config: DbscanConfig | None = None
    source: str = "dbscan"

    @classmethod
    def from_labels(cls, labels, config=None, source="dbscan") -> "ClusterOutcome":
        labels = np.asarray(labels, dtype=int)
        n = labels.size
        clusters = np.unique(labels[labels != NOISE])
        noise = float(np.count_nonzero(labels == NOISE) / n) if n else 0.0
        return cls(labels, int(clusters.size), noise, config, source)

    def summary(self) -> dict:
        d = {"source": self.source, "n_clusters": self.n_clusters, "noise_fraction": self.noise_fraction}
        if self.config is not None:
            d.update(epsilon=self.config.epsilon, min_pts=self.config.min_pts)
        return d


def _canonical_order(points: np.ndarray) -> np.ndarray:
    # lexicographic by coordinates; ties keep input order
    return np.lexsort(points.T[::-1])


def _neighbors_brute(pts: np.ndarray, eps: float) -> list[np.ndarray]:
    out = []
    for i in range(pts.shape[0]):
        d = np.sqrt(((pts - pts[i]) ** 2).sum(axis=1))
        out.append(np.flatnonzero(d <= eps))
    return out


def _neighbors_tree(pts: np.ndarray, eps: float) -> list[np.ndarray]:
    tree = cKDTree(pts)
    # widen the search, then apply the exact brute-force predicate so both paths agree bit-for-bit
    cands = tree.query_ball_point(pts, r=eps * (1 + 1e-9) + 1e-12)
    out = []
    for i, c in enumerate(cands):
        c = np.asarray(sorted(c), dtype=np.intp)
        d = np.sqrt(((pts[c] - pts[i]) ** 2).sum(axis=1))
        out.append(c[d <= eps])
    return out


def dbscan(points, config: DbscanConfig, method: str = "tree") -> ClusterOutcome:
    """Classical DBSCAN; a point's neighborhood includes itself.

    Points are visited in canonical (lexicographic) order, clusters are
    numbered by their first core point in that order, and a border point
    joins the lowest-numbered cluster that reaches it.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if n == 0:
        raise ValueError("no points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite coordinates")
    order = _canonical_order(pts)
    sp = pts[order]
    if method == "tree":
        neigh = _neighbors_tree(sp, config.epsilon)
    elif method == "brute":
        neigh = _neighbors_brute(sp, config.epsilon)
    else:
        raise ValueError(f"unknown neighbor method {method!r}")
    core = np.array([len(nb) >= config.min_pts for nb in neigh])

    labels = np.full(n, NOISE, dtype=int)
    cid = 0
    for i in range(n):
        if not core[i] or labels[i] != NOISE:
            continue
        labels[i] = cid
        stack = [i]
        while stack:
            p = stack.pop()
            for q in neigh[p]:
                if labels[q] == NOISE:
                    labels[q] = cid
                    if core[q]:
                        stack.append(q)
        cid += 1

    out = np.empty(n, dtype=int)
    out[order] = labels
    return ClusterOutcome.from_labels(out, config)


def grid_pairs(eps_list: Sequence[float] = PAPER_EPS_GRID,
               min_pts_list: Sequence[int] = PAPER_MIN_PTS) -> list[DbscanConfig]:
    return [DbscanConfig(float(e), int(m)) for m in min_pts_list for e in eps_list]


def preset_15() -> list[DbscanConfig]:
    return grid_pairs(PRESET_15_EPS, PAPER_MIN_PTS)


@dataclass
class GridResult:
    outcomes: list[ClusterOutcome]

    @property
    def agree(self) -> bool:
        return len({o.n_clusters for o in self.outcomes}) == 1

    def summary(self) -> dict:
        return {"n_configs": len(self.outcomes), "agree_on_n_clusters": self.agree,
                "outcomes": [o.summary() for o in self.outcomes]}


def dbscan_grid(points, eps_list=PAPER_EPS_GRID, min_pts_list=PAPER_MIN_PTS,
                configs: Sequence[DbscanConfig] | None = None) -> GridResult:
    if configs is None:
        if not len(eps_list) or not len(min_pts_list):
            raise ValueError("empty grid")
        configs = grid_pairs(eps_list, min_pts_list)
    return GridResult([dbscan(points, c) for c in configs])


def suggest_epsilon(points, k: int = 10) -> float:
    """Knee of the sorted k-distance curve (largest gap below the chord)."""
    pts = np.asarray(points, dtype=float)
    k = min(k, pts.shape[0] - 1)
    if k < 1:
        raise ValueError("need at least two points")
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    kd = np.sort(dist[:, -1])
    x = np.linspace(0.0, 1.0, kd.size)
    span = kd[-1] - kd[0]
    if span <= 0:
        return float(kd[0])
    y = (kd - kd[0]) / span
    return float(kd[int(np.argmax(x - y))])


def rejection_reasons(outcome: ClusterOutcome, cluster_cap: int = CLUSTER_CAP,
                      noise_threshold: float = NOISE_THRESHOLD) -> list[str]:
    reasons = []
    if outcome.n_clusters > cluster_cap:
        reasons.append("cluster_cap")
    if outcome.noise_fraction > noise_threshold:
        reasons.append("noise")
    return reasons


@dataclass
class ProtocolVerdict:
    stage_reached: str
    rejection_reasons: dict = field(default_factory=dict)
    final_labels: np.ndarray | None = None
    unimodal: bool = False

    def to_dict(self) -> dict:
        return {"stage_reached": self.stage_reached, "unimodal": self.unimodal,
                "rejection_reasons": self.rejection_reasons}


def _stage(outcomes, cap, thr):
    reasons = []
    accepted = []
    for i, o in enumerate(outcomes):
        r = rejection_reasons(o, cap, thr)
        tag = o.summary()
        tag["reasons"] = r
        reasons.append(tag)
        if not r and o.n_clusters >= 2:
            accepted.append(o)
    return reasons, accepted


def evaluate_protocol(outcomes: Sequence[ClusterOutcome],
                      hdbscan_outcomes: Sequence[ClusterOutcome] = (),
                      cluster_cap: int = CLUSTER_CAP, noise_threshold: float = NOISE_THRESHOLD,
                      fallback_kmeans: bool = True) -> ProtocolVerdict:
    """Walk DBSCAN -> HDBSCAN (imported labelings) -> k-means fallback.

    A stage is accepted when one of its outcomes passes both rejection rules
    with at least two clusters; a single cluster is the unimodality finding
    and sends the pipeline onward.
    """
    if not outcomes:
        raise ValueError("no DBSCAN outcomes")
    reasons = {}
    db_reasons, accepted = _stage(outcomes, cluster_cap, noise_threshold)
    reasons["dbscan"] = db_reasons
    unimodal = all(o.n_clusters == 1 for o in outcomes)
    if accepted:
        return ProtocolVerdict(DBSCAN_ACCEPTED, reasons, accepted[0].labels, unimodal)
    hd_reasons, hd_accepted = _stage(hdbscan_outcomes, cluster_cap, noise_threshold)
    reasons["hdbscan"] = hd_reasons if hdbscan_outcomes else "no labelings supplied"
    if hd_accepted:
        return ProtocolVerdict(HDBSCAN_ACCEPTED, reasons, hd_accepted[0].labels, unimodal)
    if fallback_kmeans:
        return ProtocolVerdict(KMEANS_FALLBACK, reasons, None, unimodal)
    return ProtocolVerdict(HDBSCAN_REJECTED, reasons, None, unimodal)


@dataclass
class KmeansResult:
    k: int
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float
    seed: int
    n_iter: int
    empty_repairs: int = 0
    silhouette: float | None = None
    inertia_trace: list = field(default_factory=list)


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    d2 = ((x - x[idx[0]]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), idx)
            j = int(remaining[0]) if remaining.size else int(rng.integers(n))
        else:
            j = int(rng.choice(n, p=d2 / total))
        idx.append(j)
        d2 = np.minimum(d2, ((x - x[j]) ** 2).sum(1))
    return x[idx].copy()


def _lloyd(x, centroids, max_iter):
    repairs = 0
    trace = []
    labels = None
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(1)
        trace.append(float(d[np.arange(x.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(centroids.shape[0]):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(0)
            else:
                # re-seed at the point farthest from its centroid
                far = int(d[np.arange(x.shape[0]), labels].argmax())
                centroids[j] = x[far]
                labels = labels.copy()
                labels[far] = j
                repairs += 1
    d = _sq_dists(x, centroids)
    labels = d.argmin(1)
    inertia = float(d[np.arange(x.shape[0]), labels].sum())
    return centroids, labels, inertia, it, repairs, trace


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, restarts: int = 10) -> KmeansResult:
    """Lloyd's algorithm from k-means++ seeding, best of ``restarts`` by inertia."""
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    if k < 2 or n < k:
        raise ValueError("need 2 <= k <= n")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        c0 = _kmeanspp(x, k, rng)
        c, labels, inertia, n_iter, repairs, trace = _lloyd(x, c0, max_iter)
        if best is None or inertia < best.inertia:
            best = KmeansResult(k, c, labels, inertia, seed, n_iter, repairs, None, trace)
    return best


def silhouette_samples(points, labels) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if uniq.size < 2:
        raise ValueError("silhouette needs at least two clusters")
    n = x.shape[0]
    sums = np.zeros((n, uniq.size))
    counts = np.array([np.count_nonzero(labels == u) for u in uniq])
    block = 512
    for start in range(0, n, block):
        d = cdist(x[start:start + block], x)
        for j, u in enumerate(uniq):
            sums[start:start + block, j] = d[:, labels == u].sum(1)
    own = np.searchsorted(uniq, labels)
    own_count = counts[own]
    a = np.where(own_count > 1, sums[np.arange(n), own] / np.maximum(own_count - 1, 1), 0.0)
    mean_other = sums / counts[None, :]
    mean_other[np.arange(n), own] = np.inf
    b = mean_other.min(1)
    s = np.where(own_count > 1, (b - a) / np.maximum(a, b), 0.0)
    return s


def silhouette(points, labels, max_exact: int = SILHOUETTE_EXACT_MAX, seed: int = 0) -> float:
    """Mean silhouette; above ``max_exact`` points a fixed-seed uniform subsample is used."""
    x = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    if x.shape[0] > max_exact:
        idx = np.sort(np.random.default_rng(seed).choice(x.shape[0], max_exact, replace=False))
        x, labels = x[idx], labels[idx]
    return float(silhouette_samples(x, labels).mean())


def select_k(points, k_range=(3, 4, 5, 6, 7), seed: int = 0, restarts: int = 10,
             max_exact: int = SILHOUETTE_EXACT_MAX) -> tuple[int, dict, dict]:
    """Pick k by best silhouette (ties -> smaller k). Returns (k*, silhouettes, fits)."""
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 2 or ks[-1] > n - 1:
        raise ValueError("k_range must lie within [2, n-1]")
    sil, fits = {}, {}
    for k in ks:
        res = kmeans(x, k, seed=seed, restarts=restarts)
        res.silhouette = silhouette(x, res.labels, max_exact=max_exact, seed=seed)
        sil[k], fits[k] = res.silhouette, res
    best = max(ks, key=lambda k: (sil[k], -k))
    return best, sil, fits
