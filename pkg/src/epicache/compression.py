"""Cache compaction: PCA on the keys, or mini-batch k-means on the entries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .cache import Cache
from .errors import DegenerateQueryError, EmptyClusterError, ParameterError, ShapeError


@dataclass(frozen=True, eq=False)
class PcaTransform:
    mean: np.ndarray  # (d,)
    components: np.ndarray  # (d_out, d), orthonormal rows

    def __post_init__(self):
        mean = np.ascontiguousarray(self.mean, dtype=np.float32)
        comps = np.ascontiguousarray(self.components, dtype=np.float32)
        if comps.ndim != 2 or mean.shape != (comps.shape[1],):
            raise ShapeError(f"mean {mean.shape} vs components {comps.shape}")
        if comps.shape[0] > comps.shape[1]:
            raise ParameterError("more components than input dimensions")
        mean.setflags(write=False)
        comps.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "components", comps)

    @property
    def d_in(self) -> int:
        return self.components.shape[1]

    @property
    def d_out(self) -> int:
        return self.components.shape[0]


class _MomentAccumulator:
    """Streaming mean and scatter matrix, merged batch by batch (Chan et al.)."""

    def __init__(self, d):
        self.n = 0
        self.mean = np.zeros(d)
        self.scatter = np.zeros((d, d))

    def update(self, batch):
        m = len(batch)
        if m == 0:
            return
        bmean = batch.mean(axis=0)
        centered = batch - bmean
        delta = bmean - self.mean
        total = self.n + m
        self.scatter += centered.T @ centered + np.outer(delta, delta) * (self.n * m / total)
        self.mean += delta * (m / total)
        self.n = total


def fit_pca(keys, d_out: int, batch_size: int = 512) -> PcaTransform:
    """Top-``d_out`` principal directions, accumulated over fixed-size batches."""
    X = np.asarray(keys, dtype=np.float64)
    K, d = X.shape
    if d_out > d:
        raise ParameterError(f"d_out={d_out} exceeds key dimension {d}")
    if not 1 <= d_out < K:
        raise ParameterError(f"need K > d_out >= 1, got K={K}, d_out={d_out}")
    acc = _MomentAccumulator(d)
    for start in range(0, K, batch_size):
        acc.update(X[start:start + batch_size])
    evals, evecs = np.linalg.eigh(acc.scatter / acc.n)
    order = np.argsort(evals)[::-1][:d_out]
    comps = evecs[:, order].T
    # deterministic sign: largest-magnitude entry of each component positive
    flip = np.sign(comps[np.arange(d_out), np.argmax(np.abs(comps), axis=1)])
    comps *= flip[:, None]
    return PcaTransform(acc.mean, comps)


def project_pca(t: PcaTransform, v) -> np.ndarray:
    """components @ (v - mean), without renormalization."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != t.d_in:
        raise ShapeError(f"expected length {t.d_in}, got {v.shape}")
    return (v - t.mean.astype(np.float64)) @ t.components.astype(np.float64).T


def apply_pca(t: PcaTransform, v) -> np.ndarray:
    """Project and rescale to unit l2-norm."""
    z = project_pca(t, v)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateQueryError("vector projects to (near) zero under PCA")
    return z / norm


# ---------------------------------------------------------------------------
# mini-batch k-means


@dataclass(frozen=True)
class KMeansConfig:
    n_clusters: int
    batch_size: int = 256
    iterations: int = 100
    seed: int = 0
    per_class: bool = True

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ParameterError("n_clusters must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ParameterError("iterations must be >= 0")


def _sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plusplus(X, n_clusters: int, rng) -> np.ndarray:
    """D^2-weighted seeding; returns the chosen row indices."""
    K = len(X)
    chosen = [int(rng.integers(K))]
    d2 = _sq_dists(X, X[chosen[0]][None])[:, 0]
    for _ in range(1, n_clusters):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(K, p=d2 / total))
        else:  # only duplicates left
            free = np.setdiff1d(np.arange(K), chosen)
            idx = int(rng.choice(free))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx][None])[:, 0])
    return np.asarray(chosen)


def kmeans_objective(X, centroids, assignment) -> float:
    X = np.asarray(X, dtype=np.float64)
    return float(np.mean(((X - np.asarray(centroids)[assignment]) ** 2).sum(axis=1)))


def _nearest(X, C):
    return np.argmin(_sq_dists(X, C), axis=1)


def fit_minibatch_kmeans(keys, cfg: KMeansConfig) -> tuple[np.ndarray, np.ndarray]:
    """Mini-batch k-means (Sculley 2010) with k-means++ seeding.

    Returns the raw (unnormalized) centroids and the final full-pass
    assignment.  Each centroid moves toward its batch members with learning
    rate 1/(points seen so far); the batch update below is the closed form of
    applying those per-point steps in sequence.
    """
    X = np.asarray(keys, dtype=np.float64)
    K = len(X)
    M = cfg.n_clusters
    if M > K:
        raise ParameterError(f"n_clusters={M} exceeds number of points {K}")
    init_rng = np.random.default_rng([cfg.seed, 0])
    batch_rng = np.random.default_rng([cfg.seed, 1])
    C = X[kmeans_plusplus(X, M, init_rng)].copy()
    counts = np.zeros(M)
    bs = min(cfg.batch_size, K)
    for _ in range(cfg.iterations):
        B = X[batch_rng.choice(K, size=bs, replace=False)]
        a = _nearest(B, C)
        n_b = np.bincount(a, minlength=M).astype(np.float64)
        sums = np.zeros_like(C)
        np.add.at(sums, a, B)
        hit = n_b > 0
        counts[hit] += n_b[hit]
        C[hit] += (sums[hit] - n_b[hit, None] * C[hit]) / counts[hit, None]

    assignment = _nearest(X, C)
    empty = np.setdiff1d(np.arange(M), assignment)
    if empty.size:
        d2 = _sq_dists(X, C)[np.arange(K), assignment]
        far = np.argsort(-d2, kind="stable")[: empty.size]
        C[empty] = X[far]
        assignment = _nearest(X, C)
        still = np.setdiff1d(np.arange(M), assignment)
        if still.size:
            raise EmptyClusterError(f"clusters {still.tolist()} empty after re-seeding")
    return C, assignment


def minibatch_kmeans(keys, cfg: KMeansConfig) -> tuple[np.ndarray, np.ndarray]:
    """Centroids renormalized to unit length (ready to serve as keys) and assignment."""
    C, assignment = fit_minibatch_kmeans(keys, cfg)
    norms = np.linalg.norm(C, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DegenerateQueryError("a centroid has (near) zero norm")
    return C / norms, assignment


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pca:
    d_out: int
    batch_size: int = 512


@dataclass(frozen=True)
class Cluster:
    cfg: KMeansConfig


CompressionMethod = Union[Pca, Cluster]


def class_budgets(class_counts, total: int) -> np.ndarray:
    """Split ``total`` across classes proportionally (largest remainder, >= 1 each)."""
    counts = np.asarray(class_counts, dtype=np.int64)
    present = counts > 0
    if total < present.sum():
        raise ParameterError(f"cluster budget {total} is smaller than the class count {present.sum()}")
    if total > counts.sum():
        raise ParameterError(f"cluster budget {total} exceeds cache size {counts.sum()}")
    raw = total * counts / counts.sum()
    budget = np.floor(raw).astype(np.int64)
    for i in np.argsort(-(raw - budget), kind="stable")[: total - budget.sum()]:
        budget[i] += 1
    for i in np.flatnonzero(present & (budget == 0)):
        budget[i] = 1
        donors = np.flatnonzero(budget > 1)
        budget[donors[np.argmax(budget[donors])]] -= 1
    # never more clusters than members
    over = budget > counts
    while over.any():
        spare = (budget - counts)[over].sum()
        budget[over] = counts[over]
        room = np.flatnonzero(budget < counts)
        for i in room[np.argsort(-(counts[room] - budget[room]), kind="stable")][:spare]:
            budget[i] += 1
        over = budget > counts
    return budget


def compress_cache(cache: Cache, method: CompressionMethod) -> Cache:
    if isinstance(method, Pca):
        if cache.key_transform is not None:
            raise ParameterError("cache is already PCA-compressed")
        t = fit_pca(cache.keys, method.d_out, method.batch_size)
        return Cache(apply_pca(t, cache.keys), cache.values, cache.theta, cache.layer, t)
    if not isinstance(method, Cluster):
        raise ParameterError(f"unknown compression method {method!r}")

    cfg = method.cfg
    keys = cache.keys.astype(np.float64)
    values = cache.values.astype(np.float64)
    if not cfg.per_class:
        centroids, assignment = minibatch_kmeans(keys, cfg)
        M = len(centroids)
        sums = np.zeros((M, cache.C))
        np.add.at(sums, assignment, values)
        new_values = sums / np.bincount(assignment, minlength=M)[:, None]
        return Cache(centroids, new_values, cache.theta, cache.layer, cache.key_transform)

    labels = np.argmax(values, axis=1)
    if not np.all(values[np.arange(len(labels)), labels] == 1.0):
        raise ParameterError("per-class clustering needs one-hot values")
    budget = class_budgets(np.bincount(labels, minlength=cache.C), cfg.n_clusters)
    new_keys, new_labels = [], []
    for c in range(cache.C):
        if budget[c] == 0:
            continue
        sub = KMeansConfig(int(budget[c]), cfg.batch_size, cfg.iterations,
                           int(np.random.SeedSequence([cfg.seed, c]).generate_state(1)[0]), True)
        centroids, _ = minibatch_kmeans(keys[labels == c], sub)
        new_keys.append(centroids)
        new_labels.append(np.full(len(centroids), c))
    new_labels = np.concatenate(new_labels)
    new_values = np.zeros((len(new_labels), cache.C))
    new_values[np.arange(len(new_labels)), new_labels] = 1.0
    return Cache(np.concatenate(new_keys), new_values, cache.theta, cache.layer, cache.key_transform)
