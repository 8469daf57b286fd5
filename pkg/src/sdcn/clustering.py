"""Euclidean K-Means (Lloyd), exact silhouette scoring and silhouette-driven k selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from sdcn.errors import DataError


class Init(str, enum.Enum):
    RANDOM = "random"
    KPLUSPLUS = "kmeans++"


@dataclass
class ClusteringResult:
    assignments: np.ndarray
    centroids: np.ndarray
    k: int
    inertia: float
    silhouette: float = float("nan")
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)
    silhouette_curve: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KRange:
    n_i: int
    n_f: int

    def __post_init__(self):
        if self.n_i < 2:
            raise ValueError(f"n_i must be >= 2 (silhouette is undefined for k=1), got {self.n_i}")
        if self.n_f < self.n_i:
            raise ValueError(f"n_f ({self.n_f}) must be >= n_i ({self.n_i})")

    def __iter__(self):
        return iter(range(self.n_i, self.n_f + 1))


def _as_points(points):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise DataError(f"points must be a (N, dim) array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("points contain non-finite values")
    return x


def _sq_dist(x, c):
    return cdist(x, c, "sqeuclidean")


def kmeanspp_init(x, k: int, rng) -> np.ndarray:
    """Indices of k distinct seeds chosen with probability proportional to D(x)^2."""
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dist(x, x[chosen])[:, 0]
    for _ in range(1, k):
        w = d2.copy()
        w[chosen] = 0.0
        total = w.sum()
        if total > 0:
            idx = int(rng.choice(n, p=w / total))
        else:
            # every remaining point coincides with a seed
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dist(x, x[idx:idx + 1])[:, 0])
    return np.array(chosen)


def _centroids(x, labels, k):
    counts = np.bincount(labels, minlength=k)
    sums = np.stack([np.bincount(labels, weights=x[:, d], minlength=k) for d in range(x.shape[1])],
                    axis=1)
    return sums / np.maximum(counts, 1)[:, None], counts


def _repair_empty(x, labels, centroids, counts, k):
    """Move the point farthest from its centroid into each empty cluster."""
    for j in np.flatnonzero(counts == 0):
        d2 = np.sum((x - centroids[labels]) ** 2, axis=1)
        d2[counts[labels] < 2] = -1.0
        f = int(np.argmax(d2))
        old = labels[f]
        labels[f] = j
        counts[old] -= 1
        counts[j] = 1
        centroids[j] = x[f]
        members = labels == old
        centroids[old] = x[members].mean(axis=0)
    return labels, centroids, counts


def kmeans(points, k: int, init=Init.KPLUSPLUS, seed=0, max_iters: int = 300,
           tol: float = 1e-4, n_init: int = 1) -> ClusteringResult:
    """Lloyd's algorithm.

    Stops when assignments stop changing or when the squared centroid shift
    falls below ``tol`` times the mean per-feature variance of the data.
    With ``n_init > 1`` the lowest-inertia run is kept.
    """
    x = _as_points(points)
    n = len(x)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}], got {k}")
    init = Init(init)
    rng = np.random.default_rng(seed)
    tol_abs = tol * float(np.mean(np.var(x, axis=0)))
    best = None
    for _ in range(n_init):
        if init is Init.KPLUSPLUS:
            seeds = kmeanspp_init(x, k, rng)
        else:
            seeds = rng.choice(n, size=k, replace=False)
        res = _lloyd(x, x[seeds].copy(), k, max_iters, tol_abs)
        if best is None or res.inertia < best.inertia:
            best = res
    return best


def _lloyd(x, centroids, k, max_iters, tol_abs) -> ClusteringResult:
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_dist(x, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(x)), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        new_c, counts = _centroids(x, labels, k)
        if np.any(counts == 0):
            labels, new_c, counts = _repair_empty(x, labels, new_c, counts, k)
        shift = float(np.sum((new_c - centroids) ** 2))
        centroids = new_c
        if shift <= tol_abs:
            break
    centroids, _ = _centroids(x, labels, k)
    inertia = float(np.sum((x - centroids[labels]) ** 2))
    history.append(inertia)
    return ClusteringResult(labels, centroids, k, inertia, n_iter=it, inertia_history=history)


def _cluster_distance_sums(x, label_sets, chunk: int = 2048):
    """For each labelling, the (N, k) matrix of summed distances to each cluster.

    Distances are computed once per row chunk and shared by all labellings.
    """
    n = len(x)
    onehots = []
    for labels in label_sets:
        k = int(labels.max()) + 1
        oh = np.zeros((n, k))
        oh[np.arange(n), labels] = 1.0
        onehots.append(oh)
    stacked = np.concatenate(onehots, axis=1)
    sums = np.empty((n, stacked.shape[1]))
    for s in range(0, n, chunk):
        sums[s:s + chunk] = cdist(x[s:s + chunk], x) @ stacked
    out, col = [], 0
    for oh in onehots:
        out.append(sums[:, col:col + oh.shape[1]])
        col += oh.shape[1]
    return out


def _check_labels(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"need one label per point ({n}), got shape {labels.shape}")
    if labels.min() < 0:
        raise ValueError("labels must be non-negative")
    counts = np.bincount(labels)
    if np.any(counts == 0):
        raise ValueError("every cluster label in [0, k) must be non-empty")
    if len(counts) < 2:
        raise ValueError("silhouette needs at least two clusters")
    return labels.astype(np.intp), counts


def _silhouette_from_sums(sums, labels, counts) -> float:
    n, k = sums.shape
    idx = np.arange(n)
    own = counts[labels]
    a = np.where(own > 1, sums[idx, labels] / np.maximum(own - 1, 1), 0.0)
    means = sums / counts[None, :]
    means[idx, labels] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    per_cluster = np.bincount(labels, weights=s, minlength=k) / counts
    return float(per_cluster.mean())


def silhouette_score(points, assignments) -> float:
    """Exact silhouette: mean over clusters of the mean member value (b - a) / max(a, b).

    Singleton members score 0, as does any point with a = b = 0.
    """
    x = _as_points(points)
    labels, counts = _check_labels(assignments, len(x))
    (sums,) = _cluster_distance_sums(x, [labels])
    return _silhouette_from_sums(sums, labels, counts)


def silhouette_scores(points, label_sets) -> list:
    """Silhouette of several labellings of the same points in one distance pass."""
    x = _as_points(points)
    checked = [_check_labels(l, len(x)) for l in label_sets]
    all_sums = _cluster_distance_sums(x, [l for l, _ in checked])
    return [_silhouette_from_sums(s, l, c) for s, (l, c) in zip(all_sums, checked)]


def subsample_for_silhouette(points, cap: int, seed) -> np.ndarray:
    """Sorted indices of a uniform subset of size ``min(cap, N)`` drawn without replacement."""
    if cap < 2:
        raise ValueError("cap must be >= 2")
    n = len(points)
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=cap, replace=False))


def iterative_kmeans(points, krange: KRange, init=Init.KPLUSPLUS, seed=0,
                     silhouette_cap: int | None = None, **kmeans_kw) -> ClusteringResult:
    """Run K-Means for every k in ``krange`` and keep the silhouette maximiser.

    Ties go to the smaller k. With ``silhouette_cap`` set, scores are computed
    on a seeded subsample of the points (clustering still uses all of them).
    """
    x = _as_points(points)
    if len(x) <= krange.n_f:
        raise ValueError(f"need more than n_f={krange.n_f} points, got {len(x)}")
    ks = list(krange)
    results = [kmeans(x, k, init=init, seed=seed, **kmeans_kw) for k in ks]
    if silhouette_cap is not None:
        idx = subsample_for_silhouette(x, silhouette_cap, seed)
    else:
        idx = np.arange(len(x))
    label_sets, valid = [], []
    for r in results:
        sub = r.assignments[idx]
        present = np.unique(sub)
        if len(present) < 2:
            valid.append(False)
            continue
        # relabel so the subsample has no empty clusters
        label_sets.append(np.searchsorted(present, sub))
        valid.append(True)
    scores = iter(silhouette_scores(x[idx], label_sets)) if label_sets else iter(())
    curve = {k: (next(scores) if ok else 0.0) for k, ok in zip(ks, valid)}
    best_k = ks[0]
    for k in ks:
        if curve[k] > curve[best_k]:
            best_k = k
    best = results[ks.index(best_k)]
    best.silhouette = curve[best_k]
    best.silhouette_curve = curve
    return best
