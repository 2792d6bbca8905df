"""Targeted l-inf PGD with random start, and white/gray/black-box evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .backbone import Backbone, CrossEntropy, input_gradient, predict_proba
from .cache import CONTINUOUS, Cache, CacheModel, CacheTargetLoss, RetrievalMethod
from .errors import ConfigurationError, EpicacheError, ParameterError

log = logging.getLogger(__name__)

DEFAULT_EPSILONS = (0.01, 0.02, 0.04, 0.06, 0.08, 0.1)
DEFAULT_STEPSIZE = 2 / 225
HEADLINE_EPSILON = 0.06


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = HEADLINE_EPSILON  # normalized: ||x_adv - x||_inf / ||x||_inf
    stepsize: float = DEFAULT_STEPSIZE  # absolute pixel units
    iterations: int = 10
    random_start: bool = True
    seed: int = 0
    return_early: bool = True  # stop each sample at its first adversarial iterate

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ParameterError(f"epsilon must be in (0, 1], got {self.epsilon}")
        if self.iterations < 1:
            raise ParameterError("iterations must be >= 1")
        if not self.stepsize > 0:
            raise ParameterError("stepsize must be positive")

    def with_epsilon(self, eps: float) -> "AttackConfig":
        return AttackConfig(eps, self.stepsize, self.iterations, self.random_start, self.seed,
                            self.return_early)


@dataclass(frozen=True)
class WhiteBox:
    name = "white"


@dataclass(frozen=True)
class GrayBox:
    name = "gray"


@dataclass(frozen=True, eq=False)
class BlackBox:
    surrogate: Backbone
    name = "black"


@dataclass(eq=False)
class AttackOutcome:
    x_adv: np.ndarray
    success: bool
    target: int


def target_selection(true_label: int, C: int, seed: int, index: int = 0) -> int:
    """Uniform over the C-1 wrong classes, fixed by (seed, index)."""
    if C < 2:
        raise ParameterError(f"need at least 2 classes, got {C}")
    j = int(np.random.default_rng([seed, index, 1]).integers(C - 1))
    return j if j < true_label else j + 1


def select_targets(labels, C: int, seed: int) -> np.ndarray:
    return np.array([target_selection(int(y), C, seed, i) for i, y in enumerate(labels)])


def project(x_new, x, radius):
    """Onto the l-inf ball of ``radius`` around ``x``, then onto [0, 1]."""
    return np.clip(np.clip(x_new, x - radius, x + radius), 0.0, 1.0)


def _safe_grad(grad_fn, X, targets):
    try:
        g = grad_fn(X, targets)
        bad = ~np.all(np.isfinite(g), axis=1)
    except FloatingPointError:
        if len(X) == 1:
            return np.zeros_like(X), np.ones(1, dtype=bool)
        parts = [_safe_grad(grad_fn, X[i:i + 1], targets[i:i + 1]) for i in range(len(X))]
        g = np.concatenate([p[0] for p in parts])
        bad = np.concatenate([p[1] for p in parts])
    g = np.where(bad[:, None], 0.0, g)
    return g, bad


def pgd_targeted_batch(predict_fn, grad_fn, X, targets, cfg: AttackConfig, indices=None):
    """PGD on a batch; returns ``(X_adv, success)``.

    ``grad_fn(X, targets)`` must return d(-log p_target)/dX row-wise.  Row ``i``
    draws its random start from ``(cfg.seed, indices[i])``, so results do not
    depend on how samples are batched.  Failed rows are returned unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    N, n = X.shape
    indices = np.arange(N) if indices is None else np.asarray(indices)
    radius = cfg.epsilon * np.abs(X).max(axis=1, keepdims=True)
    if cfg.random_start:
        u = np.stack([np.random.default_rng([cfg.seed, int(i)]).uniform(-1.0, 1.0, n) for i in indices])
        x_adv = np.clip(X + u * radius, 0.0, 1.0)
    else:
        x_adv = X.copy()
    failed = np.zeros(N, dtype=bool)
    done = np.zeros(N, dtype=bool)
    for _ in range(cfg.iterations):
        active = ~done & ~failed
        if not active.any():
            break
        g, bad = _safe_grad(grad_fn, x_adv[active], targets[active])
        failed[np.flatnonzero(active)[bad]] = True
        step = project(x_adv[active] - cfg.stepsize * np.sign(g), X[active], radius[active])
        x_adv[active] = np.where(bad[:, None], x_adv[active], step)
        if cfg.return_early:
            hit = np.argmax(predict_fn(x_adv[active]), axis=1) == targets[active]
            done[np.flatnonzero(active)[hit & ~bad]] = True
    success = (np.argmax(predict_fn(x_adv), axis=1) == targets) & ~failed
    return np.where(success[:, None], x_adv, X), success


def pgd_targeted(predict_fn, grad_fn, x, target: int, cfg: AttackConfig, index: int = 0) -> AttackOutcome:
    """Single-sample PGD; ``predict_fn``/``grad_fn`` take batches."""
    x = np.asarray(x, dtype=np.float64)
    X_adv, ok = pgd_targeted_batch(predict_fn, grad_fn, x[None], [target], cfg, [index])
    return AttackOutcome(X_adv[0], bool(ok[0]), int(target))


# ---------------------------------------------------------------------------
# model adapters


def backbone_fns(model: Backbone):
    def pred(X):
        return predict_proba(model, X)

    def grad(X, t):
        return input_gradient(model, X, CrossEntropy(np.asarray(t)))

    return pred, grad


def cache_fns(backbone: Backbone, cache: Cache, method: RetrievalMethod = CONTINUOUS):
    """Predictions use ``method``; gradients always use the continuous cache."""
    cm = CacheModel(backbone, cache, method)

    def grad(X, t):
        return input_gradient(backbone, X, CacheTargetLoss(cache, np.asarray(t)))

    return cm.predict_proba, grad


def generate_adversarial(predict_fn, grad_fn, X, targets, cfg: AttackConfig,
                         chunk: int = 256, workers: int = 1):
    X = np.asarray(X, dtype=np.float64)
    starts = list(range(0, len(X), chunk))

    def run(s):
        sl = slice(s, s + chunk)
        return pgd_targeted_batch(predict_fn, grad_fn, X[sl], targets[sl], cfg, np.arange(len(X))[sl])

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


# ---------------------------------------------------------------------------


@dataclass
class AccuracyTable:
    rows: list = field(default_factory=list)  # (model, threat, epsilon, top1)
    config: dict = field(default_factory=dict)
    examples: dict = field(default_factory=dict)  # (model, threat, eps) -> (X_adv, success)

    def add(self, model, threat, eps, top1):
        self.rows.append((model, threat, float(eps), float(top1)))

    def get(self, model, threat, eps) -> float:
        for m, t, e, a in self.rows:
            if m == model and t == threat and abs(e - eps) < 1e-12:
                return a
        raise KeyError((model, threat, eps))

    def merge(self, other: "AccuracyTable") -> "AccuracyTable":
        return AccuracyTable(self.rows + other.rows, {**self.config, **other.config},
                             {**self.examples, **other.examples})

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "threat", "epsilon", "top1"])
        for m, t, e, a in self.rows:
            w.writerow([m, t, f"{e:g}", f"{a:.6f}"])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"config": self.config,
                           "rows": [dict(model=m, threat=t, epsilon=e, top1=a) for m, t, e, a in self.rows]},
                          indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AccuracyTable":
        d = json.loads(text)
        return cls([(r["model"], r["threat"], r["epsilon"], r["top1"]) for r in d["rows"]], d.get("config", {}))


def _top1(predict_fn, X, y) -> float:
    return float(np.mean(np.argmax(predict_fn(X), axis=1) == y))


def run_threat_scenario(threat, backbone: Backbone, cache: Optional[Cache], method: RetrievalMethod,
                        data, eps_list: Sequence[float] = DEFAULT_EPSILONS,
                        attack: AttackConfig = AttackConfig(), *, workers: int = 1,
                        keep_examples: bool = False, backbone_name: str = "backbone",
                        cache_name: str = "cache") -> AccuracyTable:
    """Top-1 accuracy of backbone and/or cache model per epsilon.

    white: each model is attacked directly (cache gradients through the
    continuous cache).  gray: the backbone is attacked and both models are
    evaluated on the result (the backbone row equals its white-box row).  black: the surrogate is attacked and both models
    are evaluated.  An epsilon of 0 row (clean accuracy) is always included.
    """
    if len(eps_list) == 0:
        raise ParameterError("eps_list is empty")
    if isinstance(threat, GrayBox) and cache is None:
        raise ConfigurationError("gray-box evaluation needs a cache model")
    if not isinstance(threat, (WhiteBox, GrayBox, BlackBox)):
        raise ConfigurationError(f"unknown threat model {threat!r}")
    if isinstance(threat, BlackBox) and threat.surrogate.equals(backbone):
        raise ConfigurationError("black-box surrogate must differ from the evaluated backbone")

    X = np.asarray(data.images, dtype=np.float64)
    y = np.asarray(data.labels)
    targets = select_targets(y, backbone.n_classes, attack.seed)
    bb = backbone_fns(backbone)
    cm = cache_fns(backbone, cache, method) if cache is not None else None

    # (evaluated name, evaluated predict fn, attacked (pred, grad), attack key)
    if isinstance(threat, WhiteBox):
        plan = [(backbone_name, bb[0], bb, "backbone")]
        if cm is not None:
            plan.append((cache_name, cm[0], cm, "cache"))
    elif isinstance(threat, GrayBox):
        plan = [(backbone_name, bb[0], bb, "backbone"), (cache_name, cm[0], bb, "backbone")]
    else:
        sur = backbone_fns(threat.surrogate)
        plan = [(backbone_name, bb[0], sur, "surrogate")]
        if cm is not None:
            plan.append((cache_name, cm[0], sur, "surrogate"))

    table = AccuracyTable(config={
        "threat": threat.name, "method": str(method), "epsilons": [float(e) for e in eps_list],
        "attack": {k: v for k, v in asdict(attack).items() if k != "epsilon"},
        "n_samples": int(len(y)), "theta": None if cache is None else cache.theta,
        "cache_layer": None if cache is None else cache.layer.value,
    })
    for name, pred, _, _ in plan:
        table.add(name, threat.name, 0.0, _top1(pred, X, y))
    for eps in eps_list:
        if eps == 0:
            continue
        cfg = attack.with_epsilon(float(eps))
        produced = {}
        for name, pred, attacked, key in plan:
            if key not in produced:
                produced[key] = generate_adversarial(attacked[0], attacked[1], X, targets, cfg,
                                                     workers=workers)
            X_adv, success = produced[key]
            table.add(name, threat.name, eps, _top1(pred, X_adv, y))
            if keep_examples:
                table.examples[(name, threat.name, float(eps))] = (X_adv, success)
        log.info("%s eps=%g done", threat.name, eps)
    return table
