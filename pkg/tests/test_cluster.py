from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fillscope import cluster
from fillscope.cluster import (
    DBSCAN_ACCEPTED, HDBSCAN_ACCEPTED, KMEANS_FALLBACK, NOISE, ClusterOutcome, DbscanConfig, dbscan,
    evaluate_protocol, kmeans, select_k, silhouette, silhouette_samples,
)
from fillscope.synth import gaussian_blobs


def brute_dbscan(points, eps, min_pts):
    """Reference DBSCAN from its definition: core components via an O(n^2) matrix.

    Components are numbered by their lexicographically first core point; a
    border point takes the smallest component id among its core neighbours.
    """
    pts = [tuple(map(float, p)) for p in points]
    n = len(pts)
    order = sorted(range(n), key=lambda i: (pts[i], i))
    rank = {i: r for r, i in enumerate(order)}
    adj = [[math.dist(pts[i], pts[j]) <= eps for j in range(n)] for i in range(n)]
    core = [sum(row) >= min_pts for row in adj]
    comp = [None] * n
    for i in order:
        if not core[i] or comp[i] is not None:
            continue
        comp[i] = i
        frontier = [i]
        while frontier:
            p = frontier.pop()
            for q in range(n):
                if adj[p][q] and core[q] and comp[q] is None:
                    comp[q] = i
                    frontier.append(q)
    roots = sorted({c for c in comp if c is not None}, key=lambda r: rank[r])
    cid = {r: k for k, r in enumerate(roots)}
    labels = []
    for i in range(n):
        if core[i]:
            labels.append(cid[comp[i]])
            continue
        reach = [cid[comp[q]] for q in range(n) if adj[i][q] and core[q]]
        labels.append(min(reach) if reach else NOISE)
    return np.array(labels)


def brute_silhouette(points, labels):
    pts = [tuple(map(float, p)) for p in points]
    n = len(pts)
    vals = []
    for i in range(n):
        by = {}
        for j in range(n):
            if j != i:
                by.setdefault(labels[j], []).append(math.dist(pts[i], pts[j]))
        own = by.get(labels[i], [])
        if not own:
            vals.append(0.0)
            continue
        a = sum(own) / len(own)
        b = min(sum(v) / len(v) for k, v in by.items() if k != labels[i])
        vals.append((b - a) / max(a, b))
    return sum(vals) / n


def _instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, 301))
    d = int(rng.integers(1, 4))
    k = int(rng.integers(1, 5))
    centers = rng.uniform(-6, 6, size=(k, d))
    pts = centers[rng.integers(k, size=n)] + rng.normal(0, 1, size=(n, d))
    if seed % 3 == 0:
        pts = np.round(pts, 1)   # duplicates and exact-eps distances
    eps = float(rng.uniform(0.3, 2.0))
    return pts, eps, int(rng.integers(2, 12))


@pytest.mark.parametrize("seed", range(20))
def test_dbscan_matches_brute_force(seed):
    pts, eps, mp = _instance(seed)
    ref = brute_dbscan(pts, eps, mp)
    for method in ("tree", "brute"):
        out = dbscan(pts, DbscanConfig(eps, mp), method=method)
        assert np.array_equal(out.labels, ref)


def test_dbscan_on_exact_eps_boundary():
    pts = np.array([[0.0], [1.0], [2.0], [10.0]])
    out = dbscan(pts, DbscanConfig(1.0, 2))
    assert out.labels.tolist() == [0, 0, 0, NOISE]
    assert out.n_clusters == 1 and out.noise_fraction == 0.25


def test_dbscan_invariant_to_input_order():
    pts, eps, mp = _instance(4)
    perm = np.random.default_rng(0).permutation(len(pts))
    a = dbscan(pts, DbscanConfig(eps, mp)).labels
    b = dbscan(pts[perm], DbscanConfig(eps, mp)).labels
    assert np.array_equal(a[perm], b)


@pytest.mark.parametrize("seed", range(10))
def test_silhouette_matches_definition(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(10, 301))
    pts = rng.normal(size=(n, int(rng.integers(1, 4))))
    labels = rng.integers(0, int(rng.integers(2, 6)), size=n)
    labels[0], labels[1] = 0, 1
    # a singleton cluster exercises the s=0 convention
    labels[2] = 99
    assert abs(silhouette(pts, labels) - brute_silhouette(pts, labels)) < 1e-9


def test_silhouette_needs_two_clusters():
    with pytest.raises(ValueError):
        silhouette_samples(np.zeros((4, 2)), [0, 0, 0, 0])


def test_kmeans_result_is_a_lloyd_fixed_point():
    pts, _ = gaussian_blobs([[0, 0], [5, 5], [0, 6]], 60, 1.0, seed=2)
    res = kmeans(pts, 3, seed=1)
    d = ((pts[:, None, :] - res.centroids[None]) ** 2).sum(-1)
    assert np.array_equal(res.labels, d.argmin(1))
    assert res.inertia == pytest.approx(d.min(1).sum())
    for j in range(3):
        assert np.allclose(res.centroids[j], pts[res.labels == j].mean(0))
    assert kmeans(pts, 3, seed=1).inertia == res.inertia


def test_select_k_on_four_blobs():
    pts, _ = gaussian_blobs([[0, 0], [8, 0], [0, 8], [8, 8]], 100, 1.0, seed=5)
    k, sil, fits = select_k(pts, (2, 3, 4, 5, 6, 7), seed=0)
    assert k == 4 and max(sil, key=sil.get) == 4


def test_protocol_walk():
    one = ClusterOutcome.from_labels([0] * 10)
    noisy = ClusterOutcome.from_labels([0, 1] + [NOISE] * 8)
    good = ClusterOutcome.from_labels([0] * 5 + [1] * 5)
    v = evaluate_protocol([one, one])
    assert v.stage_reached == KMEANS_FALLBACK and v.unimodal
    assert evaluate_protocol([noisy, good]).stage_reached == DBSCAN_ACCEPTED
    v = evaluate_protocol([noisy], [good])
    assert v.stage_reached == HDBSCAN_ACCEPTED and np.array_equal(v.final_labels, good.labels)
    assert v.rejection_reasons["dbscan"][0]["reasons"] == ["noise"]
    many = ClusterOutcome.from_labels(list(range(25)))
    assert cluster.rejection_reasons(many) == ["cluster_cap"]
    assert evaluate_protocol([one], fallback_kmeans=False).stage_reached == cluster.HDBSCAN_REJECTED


def test_grid_shapes():
    assert len(cluster.grid_pairs()) == 27
    assert len(cluster.preset_15()) == 15
    pts, _ = gaussian_blobs([[0, 0]], 200, 1.0, seed=1)
    g = cluster.dbscan_grid(pts, [0.5, 1.0], [5, 10])
    assert len(g.outcomes) == 4


def test_suggest_epsilon_is_a_k_distance():
    pts, _ = gaussian_blobs([[0, 0]], 300, 1.0, seed=3)
    eps = cluster.suggest_epsilon(pts, 10)
    d = np.sort(np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1)), axis=1)[:, 10]
    assert np.any(np.isclose(d, eps))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), eps=st.floats(0.05, 3.0), mp=st.integers(2, 15))
def test_dbscan_structural_invariants(seed, eps, mp):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(int(rng.integers(5, 120)), 2))
    out = dbscan(pts, DbscanConfig(eps, mp))
    labels = out.labels
    assert set(np.unique(labels[labels != NOISE])) == set(range(out.n_clusters))
    assert 0 <= out.noise_fraction <= 1
    # border points can be claimed by an earlier cluster, but every cluster keeps a core point
    counts = (np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1)) <= eps).sum(1)
    for c in range(out.n_clusters):
        assert counts[labels == c].max() >= mp
    assert np.all(labels[counts >= mp] != NOISE)
