"""Experiment configuration and the shared steps of the evaluation pipeline."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attacks import DEFAULT_EPSILONS, DEFAULT_STEPSIZE, HEADLINE_EPSILON, AttackConfig, GrayBox, run_threat_scenario
from .backbone import Backbone, EmbeddingLayer, TrainConfig, init_backbone, train
from .cache import CONTINUOUS, DEFAULT_THETA_GRID, Cache, build_cache, parse_method, select_theta, theta_accuracies
from .compression import Cluster, KMeansConfig, Pca, compress_cache
from .corruptions import CorruptionSuite, default_suite
from .datasets import Dataset, extract_embeddings
from .errors import ConfigurationError

VARIANTS = ("standard", "augmented", "reference", "surrogate")
# init/shuffle seed offsets; standard and augmented share one so only augmentation differs
_SEED_OFFSET = {"standard": 1, "augmented": 1, "reference": 3, "surrogate": 2}


def _floats(text) -> tuple:
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).replace(",", " ").split())


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # data
    classes: int = 10
    per_class: int = 700
    width: int = 16
    # backbone
    hidden: int = 64
    epochs: int = 60
    learning_rate: float = 0.05
    batch_size: int = 32
    augment_prob: float = 0.5  # share of corrupted images per batch for the augmented variant
    # cache
    layer: str = "hidden"
    theta_grid: tuple = DEFAULT_THETA_GRID
    tune_epsilon: float = HEADLINE_EPSILON
    method: str = "continuous"
    compress_factor: int = 8
    kmeans_iterations: int = 100
    # attacks
    epsilons: tuple = DEFAULT_EPSILONS
    stepsize: float = DEFAULT_STEPSIZE
    iterations: int = 10
    # corruptions
    suite: Optional[str] = None  # path to a suite file; None means the built-in default
    workers: int = 1

    def __post_init__(self):
        for name in ("theta_grid", "epsilons"):
            object.__setattr__(self, name, _floats(getattr(self, name)))
        if self.suite == "":
            object.__setattr__(self, "suite", None)
        if self.compress_factor < 1:
            raise ConfigurationError("compress_factor must be >= 1")
        EmbeddingLayer.parse(self.layer)
        parse_method(self.method)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in dataclasses.fields(self) for v in [getattr(self, f.name)]}

    # -- derived settings ------------------------------------------------

    def train_seed(self, variant: str) -> int:
        if variant not in VARIANTS:
            raise ConfigurationError(f"unknown backbone variant {variant!r}; choose from {', '.join(VARIANTS)}")
        return 100 * self.seed + _SEED_OFFSET[variant]

    def attack(self) -> AttackConfig:
        return AttackConfig(HEADLINE_EPSILON, self.stepsize, self.iterations, seed=self.seed)

    def load_suite(self) -> CorruptionSuite:
        return default_suite() if self.suite is None else CorruptionSuite.load(self.suite)


# INI section for every field; unknown keys are rejected
_SECTIONS = {
    "run": ("seed", "workers"),
    "data": ("classes", "per_class", "width"),
    "train": ("hidden", "epochs", "learning_rate", "batch_size", "augment_prob"),
    "cache": ("layer", "theta_grid", "tune_epsilon", "method", "compress_factor", "kmeans_iterations"),
    "attack": ("epsilons", "stepsize", "iterations"),
    "corruption": ("suite",),
}


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}[name]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return _floats(raw)
    except ValueError:
        raise ConfigurationError(f"bad value for {name}: {raw!r}") from None
    return raw.strip()


def load_config(path=None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read an INI file (sections above) and apply ``overrides`` (field -> string)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file {path} not found")
        parser = configparser.ConfigParser()
        parser.read(path)
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigurationError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in _SECTIONS[section]:
                    raise ConfigurationError(f"unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw)
        if values.get("suite") and not Path(values["suite"]).is_absolute():
            values["suite"] = str(path.parent / values["suite"])  # relative to the INI file
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if not any(key in keys for keys in _SECTIONS.values()):
            raise ConfigurationError(f"unknown setting {key!r}")
        values[key] = _coerce(key, str(raw))
    return ExperimentConfig(**values)


def config_to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    d = cfg.to_dict()
    for section, keys in _SECTIONS.items():
        parser[section] = {k: (" ".join(f"{v:g}" for v in d[k]) if isinstance(d[k], list)
                               else ("" if d[k] is None else str(d[k]))) for k in keys}
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# pipeline steps


def train_variant(cfg: ExperimentConfig, data: Dataset, variant: str) -> Backbone:
    """standard, augmented (corruption augmentation), reference (h/4 units,
    half the epochs) or surrogate (standard recipe, different seed)."""
    seed = cfg.train_seed(variant)
    hidden, epochs = cfg.hidden, cfg.epochs
    if variant == "reference":
        hidden, epochs = max(cfg.hidden // 4, 1), max(cfg.epochs // 2, 1)
    tcfg = TrainConfig(epochs=epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size, seed=seed,
                       augmentation=cfg.load_suite() if variant == "augmented" else None,
                       augment_prob=cfg.augment_prob)
    return train(init_backbone(data.n, hidden, data.C, seed), data, tcfg)


def base_cache(backbone: Backbone, data: Dataset, layer) -> Cache:
    return build_cache(extract_embeddings(backbone, data, layer))


def gray_box_validation(cfg: ExperimentConfig, backbone: Backbone, cache: Cache, val: Dataset) -> Dataset:
    """Validation images attacked through the backbone at the tuning epsilon."""
    table = run_threat_scenario(GrayBox(), backbone, cache, CONTINUOUS, val, [cfg.tune_epsilon],
                                cfg.attack(), workers=cfg.workers, keep_examples=True)
    return val.with_images(table.examples[("cache", "gray", float(cfg.tune_epsilon))][0])


def tune_cache(cfg: ExperimentConfig, backbone: Backbone, cache: Cache, val: Dataset) -> tuple[Cache, list]:
    """Pick theta by gray-box adversarial validation accuracy; returns the tuned cache and the per-theta accuracies."""
    adv = gray_box_validation(cfg, backbone, cache, val)
    accs = theta_accuracies(cache, backbone, adv, cfg.theta_grid)
    return cache.with_theta(select_theta(cfg.theta_grid, accs)), accs


def compress(cfg: ExperimentConfig, cache: Cache, kind: str) -> Cache:
    if kind == "pca":
        return compress_cache(cache, Pca(max(cache.d // cfg.compress_factor, 1)))
    if kind == "kmeans":
        budget = max(cache.K // cfg.compress_factor, cache.C)
        return compress_cache(cache, Cluster(KMeansConfig(budget, iterations=cfg.kmeans_iterations, seed=cfg.seed)))
    raise ConfigurationError(f"unknown compression {kind!r}; choose pca or kmeans")
