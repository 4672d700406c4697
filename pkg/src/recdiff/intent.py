"""Intent prototype discovery: prefix segmentation of training sequences,
K-means over their encodings, nearest-prototype assignment, and cluster
quality via the silhouette score."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import InteractionDataset


@dataclass(frozen=True)
class PrefixRef:
    user: int
    length: int


@dataclass
class IntentPrototypes:
    k: int
    centroids: np.ndarray               # (k, d) float64
    fit_step: int = 0
    inertia_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.centroids.ndim != 2 or self.centroids.shape[0] != self.k:
            raise ValueError(f"centroids must be ({self.k}, d), got {self.centroids.shape}")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")


def segment_prefixes(ds: InteractionDataset, min_prefix: int = 2) -> list[PrefixRef]:
    """All contiguous training-prefix heads of length min_prefix..L per user.

    A training sequence of length L contributes L - min_prefix + 1 prefixes;
    users shorter than min_prefix contribute none.
    """
    if min_prefix < 1:
        raise ValueError(f"min_prefix must be >= 1, got {min_prefix}")
    refs = []
    for u in range(ds.num_users):
        train_len = len(ds.train_prefix(u))
        for length in range(min_prefix, train_len + 1):
            refs.append(PrefixRef(user=u, length=length))
    return refs


def _pairwise_sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # (N, K) squared Euclidean distances, clipped against negative round-off
    sq = (points ** 2).sum(axis=1)[:, None] + (centers ** 2).sum(axis=1)[None, :]
    sq -= 2.0 * points @ centers.T
    return np.maximum(sq, 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    centers[0] = points[rng.integers(n)]
    closest = _pairwise_sq_dists(points, centers[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            centers[j] = points[rng.integers(n)]
        else:
            centers[j] = points[rng.choice(n, p=closest / total)]
        closest = np.minimum(closest, _pairwise_sq_dists(points, centers[j:j + 1]).ravel())
    return centers


def kmeans_fit(points: np.ndarray, k: int, max_iters: int = 50,
               seed: int = 0, fit_step: int = 0) -> IntentPrototypes:
    """Lloyd's algorithm with k-means++ seeding.

    Stops at an assignment fixed point or after max_iters. An emptied cluster
    is repaired by moving its centroid to the point farthest from its own
    assigned centroid. The recorded inertia sequence is non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"k-means needs at least k={k} points, got {n}")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(points, k, rng)
    labels = None
    inertia_history: list[float] = []
    for _ in range(max_iters):
        dists = _pairwise_sq_dists(points, centers)
        new_labels = dists.argmin(axis=1)
        inertia_history.append(float(dists[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for j in range(k):
            members = points[labels == j]
            if len(members) > 0:
                centers[j] = members.mean(axis=0)
        empty = [j for j in range(k) if not np.any(labels == j)]
        if empty:
            own_dist = _pairwise_sq_dists(points, centers)[np.arange(n), labels].copy()
            for j in empty:
                far = int(own_dist.argmax())
                centers[j] = points[far]
                labels[far] = j
                own_dist[far] = -1.0
    return IntentPrototypes(k=k, centroids=centers, fit_step=fit_step,
                            inertia_history=inertia_history)


def assign_intent(h: np.ndarray, prototypes: IntentPrototypes) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid by Euclidean distance, ties toward the lower index.

    Accepts a single vector or a batch; returns (indices, centroids) with
    matching leading shape.
    """
    if prototypes is None:
        raise RuntimeError("intent prototypes have not been fitted")
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    batch = h[None, :] if single else h
    if batch.shape[1] != prototypes.centroids.shape[1]:
        raise ValueError(f"representation width {batch.shape[1]} does not match centroid "
                         f"width {prototypes.centroids.shape[1]}")
    idx = _pairwise_sq_dists(batch, prototypes.centroids).argmin(axis=1)
    chosen = prototypes.centroids[idx]
    if single:
        return int(idx[0]), chosen[0]
    return idx, chosen


def silhouette_score(points: np.ndarray, labels: np.ndarray, block: int = 512) -> float:
    """Mean over points of (b - a) / max(a, b), with a the mean distance to the
    point's own cluster and b the smallest mean distance to another cluster.
    Points in singleton clusters contribute 0."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    n = points.shape[0]
    if n < 3:
        raise ValueError(f"silhouette needs at least 3 points, got {n}")
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(uniq) < 2:
        raise ValueError("silhouette needs at least 2 clusters")

    num_clusters = len(uniq)
    scores = np.zeros(n, dtype=np.float64)
    for start in range(0, n, block):
        stop = min(start + block, n)
        d = np.sqrt(_pairwise_sq_dists(points[start:stop], points))    # (b, n)
        sums = np.zeros((stop - start, num_clusters), dtype=np.float64)
        for c in range(num_clusters):
            sums[:, c] = d[:, inverse == c].sum(axis=1)
        for row, i in enumerate(range(start, stop)):
            ci = inverse[i]
            if counts[ci] <= 1:
                continue
            a = sums[row, ci] / (counts[ci] - 1)                       # own distance is 0
            other = [sums[row, c] / counts[c] for c in range(num_clusters) if c != ci]
            b = min(other)
            denom = max(a, b)
            scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def save_prototypes(prototypes: IntentPrototypes, path: str | Path) -> None:
    payload = {
        "k": prototypes.k,
        "fit_step": prototypes.fit_step,
        "centroids": [[float(v) for v in row] for row in prototypes.centroids],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_prototypes(path: str | Path) -> IntentPrototypes:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return IntentPrototypes(k=int(payload["k"]),
                            centroids=np.asarray(payload["centroids"], dtype=np.float64),
                            fit_step=int(payload["fit_step"]))
