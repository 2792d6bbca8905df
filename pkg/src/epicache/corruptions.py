"""Parametric image corruptions at five severities and CE/mCE accounting."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .errors import FormatError, ParameterError, UndefinedCEError, UnsupportedVersionError

CATEGORIES = ("noise", "blur", "weather", "digital")
SUITE_HEADER = "epicache-corruption-suite"
SUITE_VERSION = 1


@dataclass(frozen=True)
class Corruption:
    name: str
    category: str
    params: tuple  # one parameter per severity 1..5

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ParameterError(f"{self.name}: unknown category {self.category!r}")
        if len(self.params) != 5:
            raise ParameterError(f"{self.name}: need exactly 5 severities, got {len(self.params)}")
        if self.name not in _KERNELS:
            raise ParameterError(f"unknown corruption {self.name!r}")
        diffs = np.diff(np.asarray(self.params, dtype=np.float64))
        if not (np.all(diffs > 0) or np.all(diffs < 0)):
            raise ParameterError(f"{self.name}: severity parameters must be strictly monotone")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))


@dataclass(frozen=True)
class CorruptionSuite:
    corruptions: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "corruptions", tuple(self.corruptions))
        names = [c.name for c in self.corruptions]
        if len(set(names)) != len(names):
            raise ParameterError("duplicate corruption names in suite")
        missing = set(CATEGORIES) - {c.category for c in self.corruptions}
        if missing:
            raise ParameterError(f"suite lacks categories {sorted(missing)}")

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.corruptions]

    def get(self, name: str) -> Corruption:
        for c in self.corruptions:
            if c.name == name:
                return c
        raise ParameterError(f"unknown corruption {name!r}")

    def to_text(self) -> str:
        lines = [f"{SUITE_HEADER} {SUITE_VERSION}", f"seed {self.seed}",
                 "# name category severity1..severity5"]
        for c in self.corruptions:
            lines.append(f"{c.name} {c.category} " + " ".join(repr(p) for p in c.params))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "CorruptionSuite":
        rows = [ln.split() for ln in text.splitlines()
                if ln.strip() and not ln.lstrip().startswith("#")]
        if not rows or rows[0][0] != SUITE_HEADER or len(rows[0]) != 2:
            raise FormatError("not a corruption suite file (missing header line)")
        if int(rows[0][1]) != SUITE_VERSION:
            raise UnsupportedVersionError(f"corruption suite version {rows[0][1]} unsupported")
        seed = 0
        corruptions = []
        for row in rows[1:]:
            if row[0] == "seed":
                seed = int(row[1])
            elif len(row) == 7:
                corruptions.append(Corruption(row[0], row[1], tuple(float(v) for v in row[2:])))
            else:
                raise FormatError(f"malformed suite line: {' '.join(row)!r}")
        return cls(tuple(corruptions), seed)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "CorruptionSuite":
        return cls.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# kernels: (images (N, W, W) float64, parameter, per-image generators) -> images


def _gaussian_noise(x, sigma, rngs):
    return x + sigma * np.stack([r.standard_normal(x.shape[1:]) for r in rngs])


def _impulse_noise(x, frac, rngs):
    out = x.copy()
    for i, r in enumerate(rngs):
        u = r.random(x.shape[1:])
        salt = r.random(x.shape[1:]) < 0.5
        hit = u < frac
        out[i][hit & salt] = 1.0
        out[i][hit & ~salt] = 0.0
    return out


def _box_blur(x, size, rngs):
    return ndimage.uniform_filter(x, size=(1, int(size), int(size)), mode="reflect")


def _motion_blur(x, length, rngs):
    return ndimage.uniform_filter1d(x, size=int(length), axis=2, mode="reflect")


def _brightness(x, delta, rngs):
    return x + delta


def _contrast(x, scale, rngs):
    m = x.mean(axis=(1, 2), keepdims=True)
    return (x - m) * scale + m


def _pixelate(x, block, rngs):
    b = int(block)
    W = x.shape[1]
    starts = np.arange(0, W, b)
    sizes = np.diff(np.append(starts, W))
    sums = np.add.reduceat(np.add.reduceat(x, starts, axis=1), starts, axis=2)
    means = sums / (sizes[:, None] * sizes[None, :])
    return np.repeat(np.repeat(means, sizes, axis=1), sizes, axis=2)


def _quantize(x, levels, rngs):
    L = int(levels) - 1
    return np.round(x * L) / L


_KERNELS: dict[str, Callable] = {
    "gaussian_noise": _gaussian_noise,
    "impulse_noise": _impulse_noise,
    "box_blur": _box_blur,
    "motion_blur_horizontal": _motion_blur,
    "brightness_shift": _brightness,
    "contrast_scale": _contrast,
    "pixelate": _pixelate,
    "quantize": _quantize,
}


def default_suite(seed: int = 2020) -> CorruptionSuite:
    return CorruptionSuite((
        Corruption("gaussian_noise", "noise", (0.12, 0.18, 0.24, 0.3, 0.4)),
        Corruption("impulse_noise", "noise", (0.02, 0.04, 0.07, 0.11, 0.17)),
        Corruption("box_blur", "blur", (2, 3, 4, 5, 6)),
        Corruption("motion_blur_horizontal", "blur", (3, 5, 7, 9, 11)),
        Corruption("brightness_shift", "weather", (0.1, 0.2, 0.3, 0.4, 0.5)),
        Corruption("contrast_scale", "weather", (0.7, 0.55, 0.4, 0.3, 0.2)),
        Corruption("pixelate", "digital", (2, 3, 4, 6, 8)),
        Corruption("quantize", "digital", (8, 6, 4, 3, 2)),
    ), seed)


def _grid_side(n):
    W = int(round(np.sqrt(n)))
    if W * W != n:
        raise ParameterError(f"image length {n} is not a square grid")
    return W


def corrupt_batch(images, name: str, severity: int, suite: CorruptionSuite | None = None,
                  seeds=None) -> np.ndarray:
    """Corrupt each row of ``images`` (N, W*W); row ``i`` draws randomness from ``seeds[i]``."""
    suite = suite or default_suite()
    if not 1 <= int(severity) <= 5:
        raise ParameterError(f"severity must be in 1..5, got {severity}")
    corruption = suite.get(name)
    x = np.asarray(images, dtype=np.float64)
    N, n = x.shape
    W = _grid_side(n)
    if seeds is None:
        seeds = np.zeros(N, dtype=np.int64)
    rngs = [np.random.default_rng(int(s)) for s in seeds]
    out = _KERNELS[name](x.reshape(N, W, W), corruption.params[int(severity) - 1], rngs)
    return np.clip(out.reshape(N, n), 0.0, 1.0)


def apply_corruption(image, name: str, severity: int, seed: int = 0,
                     suite: CorruptionSuite | None = None) -> np.ndarray:
    return corrupt_batch(np.asarray(image)[None], name, severity, suite, seeds=[seed])[0]


def cell_seeds(suite: CorruptionSuite, corruption_index: int, severity: int, N: int) -> np.ndarray:
    ss = np.random.SeedSequence([suite.seed, corruption_index, severity])
    return ss.generate_state(N, dtype=np.uint64).astype(np.int64) & np.int64(2**62 - 1)


def corrupted_copies(images, suite: CorruptionSuite, corruption_index: int, severity: int):
    c = suite.corruptions[corruption_index]
    seeds = cell_seeds(suite, corruption_index, severity, len(images))
    return corrupt_batch(images, c.name, severity, suite, seeds=seeds)


# ---------------------------------------------------------------------------
# CE / mCE


def compute_ce(model_errors, reference_errors, corruption: str = "?") -> float:
    """Ratio of mean errors over severities (not the mean of per-severity ratios)."""
    m = np.asarray(model_errors, dtype=np.float64)
    r = np.asarray(reference_errors, dtype=np.float64)
    if m.shape != (5,) or r.shape != (5,):
        raise ParameterError("expected 5 errors per corruption")
    if np.any((m < 0) | (m > 1)) or np.any((r < 0) | (r > 1)):
        raise ParameterError("error rates must lie in [0, 1]")
    ref = r.mean()
    if ref == 0:
        raise UndefinedCEError(corruption)
    return float(m.mean() / ref)


@dataclass
class RobustnessReport:
    names: list
    ce_per_corruption: dict
    mce: float
    raw_errors: np.ndarray  # (corruptions, 5) evaluated model
    reference_errors: np.ndarray  # (corruptions, 5)
    clean_error: float = float("nan")
    reference_clean_error: float = float("nan")
    model_name: str = "model"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "corruption", "ce"] + [f"err_s{s}" for s in range(1, 6)]
                   + [f"ref_err_s{s}" for s in range(1, 6)])
        for i, name in enumerate(self.names):
            w.writerow([self.model_name, name, f"{self.ce_per_corruption[name]:.6f}"]
                       + [f"{e:.6f}" for e in self.raw_errors[i]]
                       + [f"{e:.6f}" for e in self.reference_errors[i]])
        w.writerow([self.model_name, "mCE", f"{self.mce:.6f}"] + [""] * 10)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "model": self.model_name,
            "mce": self.mce,
            "ce": {k: float(v) for k, v in self.ce_per_corruption.items()},
            "errors": {n: [float(e) for e in row] for n, row in zip(self.names, self.raw_errors)},
            "reference_errors": {n: [float(e) for e in row] for n, row in zip(self.names, self.reference_errors)},
            "clean_error": self.clean_error,
            "reference_clean_error": self.reference_clean_error,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def top1_error(model_fn, images, labels) -> float:
    probs = model_fn(images)
    return float(np.mean(np.argmax(probs, axis=1) != labels))


def evaluate_corruption_robustness(model_fn, reference_fn, suite: CorruptionSuite, data,
                                   model_name: str = "model") -> RobustnessReport:
    """Top-1 error of both models on every (corruption, severity) cell.

    Both models see the same corrupted images.
    """
    X = np.asarray(data.images, dtype=np.float64)
    y = np.asarray(data.labels)
    if len(y) == 0:
        raise ParameterError("empty dataset")
    errs = np.zeros((len(suite.corruptions), 5))
    ref = np.zeros_like(errs)
    for ci in range(len(suite.corruptions)):
        for s in range(1, 6):
            Xc = corrupted_copies(X, suite, ci, s)
            errs[ci, s - 1] = top1_error(model_fn, Xc, y)
            ref[ci, s - 1] = top1_error(reference_fn, Xc, y)
    ce = {c.name: compute_ce(errs[i], ref[i], c.name) for i, c in enumerate(suite.corruptions)}
    mce = float(np.mean(list(ce.values())))
    return RobustnessReport(suite.names, ce, mce, errs, ref, top1_error(model_fn, X, y),
                            top1_error(reference_fn, X, y), model_name)


def severity1_normalized_linf(images, suite: CorruptionSuite) -> dict:
    """Mean of ||corrupt(x) - x||_inf / ||x||_inf at severity 1, per corruption."""
    X = np.asarray(images, dtype=np.float64)
    norms = np.abs(X).max(axis=1)
    out = {}
    for ci, c in enumerate(suite.corruptions):
        Xc = corrupted_copies(X, suite, ci, 1)
        out[c.name] = float(np.mean(np.abs(Xc - X).max(axis=1) / norms))
    return out
