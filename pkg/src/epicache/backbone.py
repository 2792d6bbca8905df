"""Two-layer ReLU/softmax network used as feature extractor and attack target.

All public functions accept a single input of shape ``(n,)`` or a batch of
shape ``(N, n)``; outputs follow the same convention.  Weights are held in
float32 (the checkpoint precision) and promoted to float64 for arithmetic.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import NumericalError, ParameterError, ShapeError, TrainingDivergedError

log = logging.getLogger(__name__)


class EmbeddingLayer(enum.Enum):
    HIDDEN = "hidden"  # post-ReLU hidden units (penultimate-layer analog)
    PROBS = "probs"  # softmax output probabilities (fc analog)

    @property
    def tag(self) -> int:
        return 0 if self is EmbeddingLayer.HIDDEN else 1

    @classmethod
    def from_tag(cls, tag: int) -> "EmbeddingLayer":
        try:
            return (cls.HIDDEN, cls.PROBS)[tag]
        except IndexError:
            raise ParameterError(f"unknown layer tag {tag}") from None

    @classmethod
    def parse(cls, value) -> "EmbeddingLayer":
        if isinstance(value, cls):
            return value
        aliases = {"hidden": cls.HIDDEN, "hiddenrelu": cls.HIDDEN, "probs": cls.PROBS,
                   "softmax": cls.PROBS, "softmaxprobs": cls.PROBS, "fc": cls.PROBS}
        try:
            return aliases[str(value).lower().replace("_", "")]
        except KeyError:
            raise ParameterError(f"unknown embedding layer {value!r}") from None


@dataclass(frozen=True, eq=False)
class Backbone:
    W1: np.ndarray  # (h, n)
    b1: np.ndarray  # (h,)
    W2: np.ndarray  # (C, h)
    b2: np.ndarray  # (C,)

    def __post_init__(self):
        for name in ("W1", "b1", "W2", "b2"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float32)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        h, n = self.W1.shape
        C = self.W2.shape[0]
        if self.b1.shape != (h,) or self.W2.shape != (C, h) or self.b2.shape != (C,):
            raise ShapeError(
                f"inconsistent backbone shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}")
        for name in ("W1", "b1", "W2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalError("non-finite weight entries", stage=name)

    @property
    def n_inputs(self) -> int:
        return self.W1.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W2.shape[0]

    def embedding_dim(self, layer: EmbeddingLayer) -> int:
        return self.n_hidden if EmbeddingLayer.parse(layer) is EmbeddingLayer.HIDDEN else self.n_classes

    def params64(self):
        return tuple(np.asarray(p, dtype=np.float64) for p in (self.W1, self.b1, self.W2, self.b2))

    def equals(self, other: "Backbone") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(
            (self.W1, self.b1, self.W2, self.b2), (other.W1, other.b1, other.W2, other.b2)))


def init_backbone(n: int, h: int, C: int, seed: int) -> Backbone:
    """Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    rng = np.random.default_rng(seed)
    a1, a2 = 1.0 / np.sqrt(n), 1.0 / np.sqrt(h)
    return Backbone(
        W1=rng.uniform(-a1, a1, (h, n)),
        b1=rng.uniform(-a1, a1, h),
        W2=rng.uniform(-a2, a2, (C, h)),
        b2=rng.uniform(-a2, a2, C),
    )


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_input(model: Backbone, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != model.n_inputs:
        raise ShapeError(f"expected input of length {model.n_inputs}, got shape {x.shape}")
    return x


def _forward64(params, x):
    W1, b1, W2, b2 = params
    pre = x @ W1.T + b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ W2.T + b2
    return pre, hidden, logits, softmax(logits)


def forward(model: Backbone, x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(hidden, probs)`` for one input or a batch."""
    x = _as_input(model, x)
    _, hidden, _, probs = _forward64(model.params64(), x)
    return hidden, probs


def predict_proba(model: Backbone, x) -> np.ndarray:
    return forward(model, x)[1]


def embed(model: Backbone, x, layer: EmbeddingLayer) -> np.ndarray:
    """Unnormalized embedding at ``layer``."""
    hidden, probs = forward(model, x)
    return hidden if EmbeddingLayer.parse(layer) is EmbeddingLayer.HIDDEN else probs


# ---------------------------------------------------------------------------
# gradients


@dataclass(frozen=True)
class CrossEntropy:
    """Cross-entropy ``-sum_c q_c log p_c`` against a class index or distribution."""

    target: Union[int, np.ndarray]
    scale: float = 1.0

    def target_distribution(self, C: int, batch: int | None) -> np.ndarray:
        t = self.target
        if np.ndim(t) == 0 or (np.ndim(t) == 1 and np.issubdtype(np.asarray(t).dtype, np.integer)):
            idx = np.asarray(t, dtype=np.int64)
            q = np.zeros(idx.shape + (C,))
            if idx.ndim == 0:
                q[idx] = 1.0
            else:
                q[np.arange(len(idx)), idx] = 1.0
        else:
            q = np.asarray(t, dtype=np.float64)
        if batch is not None and q.ndim == 1:
            q = np.broadcast_to(q, (batch, C))
        return q


class EmbeddingLoss:
    """A loss defined on an embedding layer.

    Subclasses implement ``embedding_grad(embedding) -> dloss/dembedding``; the
    backbone supplies the rest of the chain rule.
    """

    layer: EmbeddingLayer
    scale: float = 1.0

    def embedding_grad(self, embedding: np.ndarray) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError


LossSpec = Union[CrossEntropy, EmbeddingLoss]


def _check_finite(arr, stage):
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite values", stage=stage)


def _backprop_hidden(params, pre, g_hidden):
    W1 = params[0]
    g_pre = g_hidden * (pre > 0)
    _check_finite(g_pre, "hidden")
    g_x = g_pre @ W1
    _check_finite(g_x, "input")
    return g_x


def _backprop_probs(params, pre, probs, g_probs):
    W2 = params[2]
    # softmax VJP: p * (g - <g, p>)
    g_logits = probs * (g_probs - np.sum(g_probs * probs, axis=-1, keepdims=True))
    _check_finite(g_logits, "probs")
    return _backprop_hidden(params, pre, g_logits @ W2)


def embedding_vjp(model: Backbone, x, layer: EmbeddingLayer, grad_embedding) -> np.ndarray:
    """Vector-Jacobian product of ``embed(model, x, layer)`` with ``grad_embedding``."""
    x = _as_input(model, x)
    params = model.params64()
    pre, hidden, logits, probs = _forward64(params, x)
    g = np.asarray(grad_embedding, dtype=np.float64)
    _check_finite(g, "embedding")
    if EmbeddingLayer.parse(layer) is EmbeddingLayer.HIDDEN:
        return _backprop_hidden(params, pre, g)
    return _backprop_probs(params, pre, probs, g)


def input_gradient(model: Backbone, x, loss: LossSpec) -> np.ndarray:
    """Exact d loss / d x by backpropagation."""
    x = _as_input(model, x)
    params = model.params64()
    pre, hidden, logits, probs = _forward64(params, x)
    _check_finite(logits, "logits")
    if isinstance(loss, CrossEntropy):
        q = loss.target_distribution(model.n_classes, x.shape[0] if x.ndim == 2 else None)
        # d/dlogits of -sum q log softmax = p * sum(q) - q
        g_logits = loss.scale * (probs * q.sum(axis=-1, keepdims=True) - q)
        return _backprop_hidden(params, pre, g_logits @ params[2])
    emb = hidden if loss.layer is EmbeddingLayer.HIDDEN else probs
    g = loss.scale * np.asarray(loss.embedding_grad(emb), dtype=np.float64)
    _check_finite(g, "embedding")
    if loss.layer is EmbeddingLayer.HIDDEN:
        return _backprop_hidden(params, pre, g)
    return _backprop_probs(params, pre, probs, g)


def embedding_jacobian(model: Backbone, x, layer: EmbeddingLayer) -> np.ndarray:
    """Full Jacobian d embed / d x, shape ``(d, n)`` (or ``(N, d, n)`` for a batch)."""
    x = _as_input(model, x)
    params = model.params64()
    W1, _, W2, _ = params
    pre, hidden, logits, probs = _forward64(params, x)
    J_hidden = (pre > 0)[..., :, None] * W1  # (..., h, n)
    if EmbeddingLayer.parse(layer) is EmbeddingLayer.HIDDEN:
        return J_hidden
    p = probs[..., :, None]
    dsoft = np.eye(model.n_classes) * p - p * probs[..., None, :]  # (..., C, C)
    return dsoft @ W2 @ J_hidden


def cross_entropy_loss(model: Backbone, x, labels) -> float:
    _, probs = forward(model, x)
    labels = np.asarray(labels)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.05
    batch_size: int = 32
    seed: int = 0
    augmentation: Optional[object] = None  # CorruptionSuite
    augment_prob: float = 0.5
    cosine_decay: bool = True  # anneal the step size to 0 over all updates

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")


def _augment(images, suite, rng, prob):
    from .corruptions import corrupt_batch

    out = images.copy()
    chosen = np.flatnonzero(rng.random(len(images)) < prob)
    if chosen.size == 0:
        return out
    which = rng.integers(len(suite.corruptions), size=chosen.size)
    sev = rng.integers(1, 6, size=chosen.size)
    seeds = rng.integers(2**63 - 1, size=chosen.size)
    for ci in range(len(suite.corruptions)):
        for s in range(1, 6):
            m = (which == ci) & (sev == s)
            if m.any():
                idx = chosen[m]
                out[idx] = corrupt_batch(images[idx], suite.corruptions[ci].name, s, suite,
                                         seeds=seeds[m])
    return out


def train(model: Backbone, data, cfg: TrainConfig, *, return_history: bool = False,
          callback: Callable[[int, float], None] | None = None):
    """Minibatch SGD on cross-entropy, starting from ``model``.

    ``data`` needs ``images`` (N, n) and ``labels`` (N,).  With
    ``cfg.augmentation`` set, each sample of each batch is replaced by a random
    corruption at a random severity with probability ``cfg.augment_prob``.
    The history holds the full-dataset clean loss before training and after
    every epoch.
    """
    X = np.asarray(data.images, dtype=np.float64)
    y = np.asarray(data.labels, dtype=np.int64)
    if len(X) == 0:
        raise ParameterError("training set is empty")
    if X.shape[1] != model.n_inputs:
        raise ShapeError(f"dataset has {X.shape[1]} inputs, model expects {model.n_inputs}")
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ParameterError("labels outside [0, C)")

    rng = np.random.default_rng(cfg.seed)
    W1, b1, W2, b2 = (p.copy() for p in model.params64())
    Y = np.eye(model.n_classes)[y]

    def full_loss():
        _, _, _, probs = _forward64((W1, b1, W2, b2), X)
        return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))

    history = [full_loss()]
    bs = cfg.batch_size
    total_steps = cfg.epochs * -(-len(X) // bs)
    step = 0
    # divergence is detected explicitly after each epoch
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), bs):
                idx = order[start:start + bs]
                xb = X[idx]
                if cfg.augmentation is not None:
                    xb = _augment(xb, cfg.augmentation, rng, cfg.augment_prob)
                lr = cfg.learning_rate
                if cfg.cosine_decay:
                    lr *= 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
                step += 1
                pre, hidden, logits, probs = _forward64((W1, b1, W2, b2), xb)
                g_logits = (probs - Y[idx]) / len(idx)
                g_pre = (g_logits @ W2) * (pre > 0)
                W2 -= lr * (g_logits.T @ hidden)
                b2 -= lr * g_logits.sum(axis=0)
                W1 -= lr * (g_pre.T @ xb)
                b1 -= lr * g_pre.sum(axis=0)
            loss = full_loss()
            if not np.isfinite(loss) or not np.all(np.isfinite(W1)) or not np.all(np.isfinite(W2)):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch + 1}; learning rate "
                    f"{cfg.learning_rate} is probably too high", stage="train")
            history.append(loss)
            log.debug("epoch %d loss %.5f", epoch + 1, loss)
            if callback is not None:
                callback(epoch + 1, loss)

    trained = Backbone(W1, b1, W2, b2)
    return (trained, history) if return_history else trained
