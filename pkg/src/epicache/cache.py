"""Key-value episodic cache over unit-norm embeddings.

Prediction weights every stored value by ``exp(theta * <query, key>)`` and
averages (continuous cache), optionally restricted to the ``k`` most similar
keys.  Queries are l2-normalized before scoring, so ``theta`` acts on cosine
similarities in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .backbone import Backbone, EmbeddingLayer, EmbeddingLoss, embed, embedding_jacobian, input_gradient
from .errors import DegenerateQueryError, NumericalError, ParameterError, ShapeError

DEFAULT_THETA = 50.0
DEFAULT_THETA_GRID = tuple(float(t) for t in range(10, 100, 10))
KEY_NORM_TOL = 1e-6


@dataclass(frozen=True)
class Continuous:
    def __str__(self):
        return "continuous"


@dataclass(frozen=True)
class Knn:
    k: int

    def __post_init__(self):
        if int(self.k) < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")

    def __str__(self):
        return f"{self.k}-nn"


RetrievalMethod = Union[Continuous, Knn]
CONTINUOUS = Continuous()


def parse_method(text: str) -> RetrievalMethod:
    text = str(text).strip().lower()
    if text in ("continuous", "cont"):
        return CONTINUOUS
    for suffix in ("-nn", "nn"):
        if text.endswith(suffix):
            return Knn(int(text[: -len(suffix)]))
    if text.startswith("knn"):
        return Knn(int(text[3:].lstrip(":=(").rstrip(")")))
    raise ParameterError(f"unknown retrieval method {text!r}")


@dataclass(frozen=True, eq=False)
class Cache:
    keys: np.ndarray  # (K, d) float32, unit rows
    values: np.ndarray  # (K, C) float32, probability rows
    theta: float = DEFAULT_THETA
    layer: EmbeddingLayer = EmbeddingLayer.HIDDEN
    key_transform: Optional[object] = None  # compression.PcaTransform

    def __post_init__(self):
        keys = np.ascontiguousarray(self.keys, dtype=np.float32)
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if keys.ndim != 2 or values.ndim != 2 or len(keys) != len(values):
            raise ShapeError(f"keys {keys.shape} and values {values.shape} disagree")
        if len(keys) < 1:
            raise ParameterError("cache must hold at least one entry")
        if not (np.isfinite(self.theta) and self.theta > 0):
            raise ParameterError(f"theta must be positive, got {self.theta}")
        norms = np.linalg.norm(keys.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > KEY_NORM_TOL)
        if bad.size:
            raise ParameterError(f"key row {bad[0]} has norm {norms[bad[0]]!r}, expected 1")
        v64 = values.astype(np.float64)
        if np.any(v64 < 0) or np.any(np.abs(v64.sum(axis=1) - 1.0) > 1e-6):
            raise ParameterError("value rows must be probability vectors")
        if self.key_transform is not None and self.key_transform.d_out != keys.shape[1]:
            raise ShapeError("key transform output size differs from key dimension")
        keys.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "layer", EmbeddingLayer.parse(self.layer))

    @property
    def K(self) -> int:
        return self.keys.shape[0]

    @property
    def d(self) -> int:
        return self.keys.shape[1]

    @property
    def C(self) -> int:
        return self.values.shape[1]

    @property
    def input_dim(self) -> int:
        """Dimension of raw embeddings accepted by :meth:`query`."""
        return self.d if self.key_transform is None else self.key_transform.d_in

    def with_theta(self, theta: float) -> "Cache":
        return Cache(self.keys, self.values, theta, self.layer, self.key_transform)

    def query(self, embedding) -> np.ndarray:
        """Map a raw embedding (or batch) to the unit query used for scoring."""
        u = normalize_query(embedding)
        if self.key_transform is not None:
            from .compression import apply_pca

            return apply_pca(self.key_transform, u)
        return u


def key_storage_bytes(K: int, d: int, itemsize: int = 4) -> int:
    """Bytes needed to hold a K x d key matrix."""
    return int(K) * int(d) * itemsize


def normalize_query(embedding) -> np.ndarray:
    e = np.asarray(embedding, dtype=np.float64)
    norm = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateQueryError("cannot normalize a zero (or non-finite) embedding")
    return e / norm


def build_cache(embeddings, theta: float = DEFAULT_THETA, layer: EmbeddingLayer | None = None,
                C: int | None = None) -> Cache:
    """Cache with l2-normalized keys and one-hot values, in input order."""
    vectors = np.asarray(embeddings.vectors, dtype=np.float64)
    labels = np.asarray(embeddings.labels, dtype=np.int64)
    C = C if C is not None else getattr(embeddings, "C", int(labels.max()) + 1)
    if len(vectors) < 1:
        raise ParameterError("need at least one embedding")
    if labels.min() < 0 or labels.max() >= C:
        raise ParameterError(f"labels outside [0, {C})")
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateQueryError(f"embedding row {zero[0]} has zero norm")
    keys = vectors / norms[:, None]
    values = np.zeros((len(labels), C))
    values[np.arange(len(labels)), labels] = 1.0
    return Cache(keys, values, theta, layer if layer is not None else embeddings.layer)


def _check_query(cache: Cache, query) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim not in (1, 2) or q.shape[-1] != cache.d:
        raise ShapeError(f"query must have length {cache.d}, got shape {q.shape}")
    return q


def similarity_scores(cache: Cache, query) -> np.ndarray:
    """exp(theta * (<query, key_k> - max_j <query, key_j>)) for every key.

    Scores are defined up to a common factor; the max shift keeps them in (0, 1].
    """
    q = _check_query(cache, query)
    dots = q @ cache.keys.astype(np.float64).T
    return np.exp(cache.theta * (dots - dots.max(axis=-1, keepdims=True)))


def _knn_mask(dots: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -dots: equal similarities keep ascending index order
    order = np.argsort(-dots, axis=-1, kind="stable")[..., :k]
    mask = np.zeros(dots.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def predict(cache: Cache, query, method: RetrievalMethod = CONTINUOUS) -> np.ndarray:
    """Similarity-weighted average of cached values for a unit query (or batch)."""
    sigma = similarity_scores(cache, query)
    if isinstance(method, Knn):
        if method.k > cache.K:
            raise ParameterError(f"k={method.k} exceeds cache size {cache.K}")
        if method.k < cache.K:
            q = _check_query(cache, query)
            sigma = sigma * _knn_mask(q @ cache.keys.astype(np.float64).T, method.k)
    elif not isinstance(method, Continuous):
        raise ParameterError(f"unknown retrieval method {method!r}")
    return (sigma @ cache.values.astype(np.float64)) / sigma.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class CacheModel:
    """Backbone embedding followed by cache lookup."""

    backbone: Backbone
    cache: Cache
    method: RetrievalMethod = CONTINUOUS

    def __post_init__(self):
        if self.backbone.embedding_dim(self.cache.layer) != self.cache.input_dim:
            raise ShapeError("cache key dimension does not match backbone embedding layer")

    def predict_proba(self, x) -> np.ndarray:
        return predict(self.cache, self.cache.query(embed(self.backbone, x, self.cache.layer)), self.method)

    __call__ = predict_proba

    def loss_gradient(self, x, target) -> np.ndarray:
        """Gradient of -log p_target through the continuous cache."""
        return input_gradient(self.backbone, x, CacheTargetLoss(self.cache, target))


def accuracy(model_fn, images, labels) -> float:
    return float(np.mean(np.argmax(model_fn(images), axis=-1) == np.asarray(labels)))


def select_theta(grid: Sequence[float], accuracies: Sequence[float]) -> float:
    """Highest accuracy wins; ties go to the smallest theta."""
    if len(grid) == 0:
        raise ParameterError("theta grid is empty")
    pairs = sorted(zip(grid, accuracies), key=lambda p: (-p[1], p[0]))
    return float(pairs[0][0])


def theta_accuracies(cache: Cache, backbone: Backbone, val, grid: Sequence[float]) -> list[float]:
    q = cache.query(embed(backbone, val.images, cache.layer))
    y = np.asarray(val.labels)
    return [float(np.mean(np.argmax(predict(cache.with_theta(t), q), axis=1) == y)) for t in grid]


def tune_theta(cache: Cache, backbone: Backbone, val, grid: Sequence[float] = DEFAULT_THETA_GRID) -> float:
    """Grid element maximizing top-1 accuracy of the continuous cache on ``val``.

    ``val`` may hold adversarial images, e.g. gray-box examples of a
    validation split.
    """
    grid = list(grid)
    if not grid:
        raise ParameterError("theta grid is empty")
    if any(not t > 0 for t in grid):
        raise ParameterError("theta grid values must be positive")
    if len(val) == 0:
        raise ParameterError("validation set is empty")
    return select_theta(grid, theta_accuracies(cache, backbone, val, grid))


# ---------------------------------------------------------------------------
# derivatives


def _query_jacobian(cache: Cache, e: np.ndarray):
    """q and dq/de for a single raw embedding ``e``."""
    ne = np.linalg.norm(e)
    if ne == 0:
        raise DegenerateQueryError("cannot normalize a zero embedding")
    u = e / ne
    J = (np.eye(len(u)) - np.outer(u, u)) / ne
    t = cache.key_transform
    if t is None:
        return u, J
    A = t.components.astype(np.float64)
    z = A @ (u - t.mean.astype(np.float64))
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise DegenerateQueryError("query projects to ~zero")
    q = z / nz
    return q, ((np.eye(len(q)) - np.outer(q, q)) / nz) @ A @ J


def prediction_jacobian(cache: Cache, backbone: Backbone, x) -> np.ndarray:
    """Exact d p_cache / d x of the continuous cache, shape (C, n) or (N, C, n)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return np.stack([prediction_jacobian(cache, backbone, xi) for xi in x])
    e = embed(backbone, x, cache.layer)
    J_e = embedding_jacobian(backbone, x, cache.layer)  # (d, n)
    q, J_q = _query_jacobian(cache, e)  # (d', d)
    keys = cache.keys.astype(np.float64)
    V = cache.values.astype(np.float64)
    s = keys @ q
    w = np.exp(cache.theta * (s - s.max()))
    w /= w.sum()
    p = w @ V
    # dp/ds = theta * (V^T diag(w) - p w^T); contracted with ds/dq = keys
    dp_dq = cache.theta * ((V * w[:, None]).T @ keys - np.outer(p, w @ keys))
    J = dp_dq @ J_q @ J_e
    if not np.all(np.isfinite(J)):
        raise NumericalError("non-finite Jacobian", stage="cache")
    return J


class CacheTargetLoss(EmbeddingLoss):
    """-log p_target of the continuous cache, as a loss on the backbone embedding."""

    def __init__(self, cache: Cache, target, scale: float = 1.0):
        self.cache = cache
        self.layer = cache.layer
        self.target = np.asarray(target, dtype=np.int64)
        self.scale = scale

    def _logs(self, e):
        c = self.cache
        q = c.query(e)
        s = q @ c.keys.astype(np.float64).T
        logits = c.theta * s
        with np.errstate(divide="ignore"):
            log_v = np.log(c.values.astype(np.float64)[:, self.target].T)  # (..., K)
        return q, logits, log_v

    def value(self, e) -> np.ndarray:
        from scipy.special import logsumexp

        _, logits, log_v = self._logs(np.asarray(e, dtype=np.float64))
        return self.scale * (logsumexp(logits, axis=-1) - logsumexp(logits + log_v, axis=-1))

    def embedding_grad(self, e):
        from scipy.special import softmax as _softmax

        e = np.asarray(e, dtype=np.float64)
        c = self.cache
        q, logits, log_v = self._logs(e)
        w = _softmax(logits, axis=-1)
        w_t = _softmax(logits + log_v, axis=-1)  # nan if the target has no mass
        g_s = c.theta * (w - w_t)
        g_q = g_s @ c.keys.astype(np.float64)
        return _query_vjp(c, e, q, g_q)


def _unit_vjp(v, norm, g):
    # VJP of x -> x/|x| evaluated where x/|x| = v
    return (g - v * np.sum(v * g, axis=-1, keepdims=True)) / norm


def _query_vjp(cache: Cache, e, q, g_q):
    ne = np.linalg.norm(e, axis=-1, keepdims=True)
    u = e / ne
    t = cache.key_transform
    if t is None:
        return _unit_vjp(u, ne, g_q)
    A = t.components.astype(np.float64)
    nz = np.linalg.norm((u - t.mean.astype(np.float64)) @ A.T, axis=-1, keepdims=True)
    g_u = _unit_vjp(q, nz, g_q) @ A
    return _unit_vjp(u, ne, g_u)
