"""Procedural shape/texture image classes and embedding extraction."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, EmbeddingLayer, embed
from .errors import ParameterError, ShapeError

SPLITS = ("train", "val", "test")

# low shape contrast on a mid-gray background with a random-phase texture:
# hard enough that a small MLP lands near 85-90% clean accuracy
PIXEL_NOISE = 0.12
SHAPE_LEVEL = 0.06
BACKGROUND = 0.3
TEXTURE_AMPLITUDE = 0.08
PHASE_JITTER = 6.3
ANGLE_JITTER = 0.05
FREQ_JITTER = 0.03
SHIFT_JITTER = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (N, W*W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    W: int
    C: int
    split: str = "train"

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 2 or images.shape[1] != self.W * self.W:
            raise ShapeError(f"images must be (N, {self.W * self.W}), got {images.shape}")
        if len(images) < 1 or len(labels) != len(images):
            raise ShapeError(f"need N >= 1 images with matching labels, got {len(images)}/{len(labels)}")
        if images.min() < 0.0 or images.max() > 1.0:
            raise ParameterError("pixels outside [0, 1]")
        if labels.min() < 0 or labels.max() >= self.C:
            raise ParameterError(f"labels outside [0, {self.C})")
        if self.split not in SPLITS:
            raise ParameterError(f"unknown split {self.split!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def n(self) -> int:
        return self.W * self.W

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.W, self.C, self.split)

    def with_images(self, images) -> "Dataset":
        return Dataset(np.clip(images, 0.0, 1.0), self.labels, self.W, self.C, self.split)


@dataclass(frozen=True, eq=False)
class LabeledEmbeddings:
    vectors: np.ndarray  # (K, d) float32
    labels: np.ndarray  # (K,) int64
    layer: EmbeddingLayer
    backbone_id: str
    C: int

    def __post_init__(self):
        vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if vectors.ndim != 2 or len(vectors) != len(labels):
            raise ShapeError(f"{vectors.shape} vectors vs {labels.shape} labels")
        if not self.backbone_id:
            raise ParameterError("backbone_id must be nonempty")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "layer", EmbeddingLayer.parse(self.layer))

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# procedural classes


def _grid(W):
    c = (np.arange(W) + 0.5) / W - 0.5
    return np.meshgrid(c, c, indexing="ij")  # row (y), column (x)


def _shape_masks(W):
    y, x = _grid(W)
    r = np.hypot(x, y)
    t = 0.12  # half stroke width
    masks = [
        r < 0.32,  # disk
        (np.abs(x) < t) | (np.abs(y) < t),  # cross
        (np.abs(y) < 0.36) & (np.cos(2 * np.pi * 3 * y) > 0.3),  # horizontal bars
        (y > -0.3) & (y < 0.3) & (np.abs(x) < (y + 0.3) * 0.65),  # triangle
        (r > 0.22) & (r < 0.38),  # ring
        (np.maximum(np.abs(x), np.abs(y)) < 0.38) & (np.maximum(np.abs(x), np.abs(y)) > 0.22),  # frame
        (np.abs(x) < 0.36) & (np.cos(2 * np.pi * 3 * x) > 0.3),  # vertical bars
        np.abs(x - y) < t * 1.2,  # diagonal
        (np.abs(x - y) < t) | (np.abs(x + y) < t),  # x
        ((np.abs(x + 0.2) < t) & (y < 0.3)) | ((np.abs(y - 0.25) < t) & (x > -0.3)),  # L
    ]
    return [m.astype(np.float64).ravel() for m in masks]


def class_prototype_params(C: int):
    """(orientation, frequency, phase) of the texture of each class."""
    params = []
    freqs = (2.0, 3.0, 4.0)
    for c in range(C):
        params.append((np.pi * c / C, freqs[c % len(freqs)] + 0.5 * (c // len(freqs) % 2),
                       2 * np.pi * ((c * 0.37) % 1.0)))
    return params


def _texture(W, angle, freq, phase):
    y, x = _grid(W)
    proj = x * np.cos(angle) + y * np.sin(angle)
    return np.sin(2 * np.pi * freq * proj + phase).ravel()


def _render(mask, tex):
    return BACKGROUND + SHAPE_LEVEL * mask + TEXTURE_AMPLITUDE * tex


def class_prototypes(C: int, W: int) -> np.ndarray:
    """Noise-free, jitter-free image of every class, shape ``(C, W*W)``."""
    masks = _shape_masks(W)
    tex = class_prototype_params(C)
    return np.stack([np.clip(_render(masks[c % len(masks)], _texture(W, *tex[c])), 0, 1)
                     for c in range(C)])


def _split_counts(per_class, fractions):
    raw = np.asarray(fractions, dtype=np.float64) * per_class
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: per_class - counts.sum()]:
        counts[i] += 1
    return counts


def generate_dataset(C: int = 10, per_class: int = 700, W: int = 16, seed: int = 0,
                     split_fractions=(0.8, 0.1, 0.1)) -> tuple[Dataset, Dataset, Dataset]:
    """Generate stratified, disjoint train/val/test splits.

    Class ``c`` combines shape ``c mod 10`` with an oriented sinusoid texture.
    Each sample draws an effectively random texture phase, jitters frequency
    and angle slightly and adds Gaussian pixel noise (sd 0.12); pixels are
    clipped to [0, 1].
    """
    if C < 2:
        raise ParameterError(f"need C >= 2, got {C}")
    if W < 8:
        raise ParameterError(f"need W >= 8, got {W}")
    if per_class < 1:
        raise ParameterError("per_class must be >= 1")
    fractions = np.asarray(split_fractions, dtype=np.float64)
    if len(fractions) != 3 or np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ParameterError(f"split fractions must be 3 non-negative values summing to 1, got {split_fractions}")

    protos = class_prototypes(C, W)
    d = np.sqrt(((protos[:, None] - protos[None]) ** 2).sum(-1))
    assert np.all(d[~np.eye(C, dtype=bool)] / W > 0.03), "class prototypes too close"

    rng = np.random.default_rng(seed)
    masks = _shape_masks(W)
    tex = class_prototype_params(C)
    counts = _split_counts(per_class, fractions)
    parts = {s: ([], []) for s in SPLITS}
    for c in range(C):
        angle, freq, phase = tex[c]
        mask = masks[c % len(masks)]
        imgs = np.empty((per_class, W * W))
        for i in range(per_class):
            t = _texture(W, angle + rng.normal(0, ANGLE_JITTER), freq * (1 + rng.normal(0, FREQ_JITTER)),
                         phase + rng.normal(0, PHASE_JITTER))
            m = mask
            if SHIFT_JITTER:
                dy, dx = rng.integers(-SHIFT_JITTER, SHIFT_JITTER + 1, size=2)
                m = np.roll(mask.reshape(W, W), (dy, dx), axis=(0, 1)).ravel()
            imgs[i] = _render(m, t) + rng.normal(0, PIXEL_NOISE, W * W)
        imgs = np.clip(imgs, 0.0, 1.0)
        order = rng.permutation(per_class)
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for s, lo, hi in zip(SPLITS, bounds[:-1], bounds[1:]):
            parts[s][0].append(imgs[order[lo:hi]])
            parts[s][1].append(np.full(hi - lo, c))

    out = []
    for s in SPLITS:
        X = np.concatenate(parts[s][0])
        y = np.concatenate(parts[s][1])
        if len(y) == 0:
            raise ParameterError(f"split {s!r} would be empty")
        perm = rng.permutation(len(y))
        out.append(Dataset(X[perm], y[perm], W, C, s))
    return tuple(out)


# ---------------------------------------------------------------------------


def backbone_digest(model: Backbone) -> str:
    from .fileio import backbone_to_bytes

    return hashlib.sha256(backbone_to_bytes(model)).hexdigest()


def extract_embeddings(backbone: Backbone, data: Dataset, layer: EmbeddingLayer) -> LabeledEmbeddings:
    layer = EmbeddingLayer.parse(layer)
    vectors = embed(backbone, data.images, layer)
    return LabeledEmbeddings(vectors, data.labels.copy(), layer, backbone_digest(backbone), data.C)
