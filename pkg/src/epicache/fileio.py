"""Binary persistence for backbones, datasets, embeddings and caches.

Every file is little-endian and starts with a 4-byte magic and a u32 format
version.  Layouts (after magic + version):

EPBB backbone    n, h, C (u32) | W1 f32[h*n] | b1 f32[h] | W2 f32[C*h] | b2 f32[C]
EPDS dataset     N, W, C (u32), split (u8: 0 train, 1 val, 2 test)
                 | images f32[N*W*W] | labels u32[N]
EPEM embeddings  K, d, C (u32), layer (u8: 0 hidden, 1 probs), id_len (u16),
                 backbone_id utf-8[id_len] | vectors f32[K*d] | labels u32[K]
EPCH cache       K, d, C (u32), theta (f64), layer (u8), has_transform (u8)
                 [d_in, d_out (u32) | mean f32[d_in] | components f32[d_out*d_in]]
                 | keys f32[K*d] | values f32[K*C]
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import Backbone, EmbeddingLayer
from .cache import Cache
from .compression import PcaTransform
from .datasets import SPLITS, Dataset, LabeledEmbeddings
from .errors import FormatError, TruncatedFileError, UnsupportedVersionError

VERSION = 1
MAGIC_BACKBONE = b"EPBB"
MAGIC_DATASET = b"EPDS"
MAGIC_EMBEDDINGS = b"EPEM"
MAGIC_CACHE = b"EPCH"

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class _Reader:
    def __init__(self, buf: bytes, magic: bytes):
        self.buf = buf
        self.pos = 0
        got = self.take(4, "magic")
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}")
        version = self.unpack("<I", "version")[0]
        if version != VERSION:
            raise UnsupportedVersionError(f"{magic.decode()} version {version} is not supported (expected {VERSION})")

    def take(self, nbytes: int, what: str) -> bytes:
        if self.pos + nbytes > len(self.buf):
            raise TruncatedFileError(f"file truncated while reading {what}: need {nbytes} bytes, "
                                     f"{len(self.buf) - self.pos} left", self.pos)
        out = self.buf[self.pos:self.pos + nbytes]
        self.pos += nbytes
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, shape, what):
        count = int(np.prod(shape))
        raw = self.take(count * dtype.itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes after payload")


def _f32(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_F32).tobytes()


def _header(magic: bytes) -> bytes:
    return magic + struct.pack("<I", VERSION)


# --- backbone -------------------------------------------------------------


def backbone_to_bytes(m: Backbone) -> bytes:
    return (_header(MAGIC_BACKBONE) + struct.pack("<III", m.n_inputs, m.n_hidden, m.n_classes)
            + _f32(m.W1) + _f32(m.b1) + _f32(m.W2) + _f32(m.b2))


def backbone_from_bytes(buf: bytes) -> Backbone:
    r = _Reader(buf, MAGIC_BACKBONE)
    n, h, C = r.unpack("<III", "dimensions")
    W1 = r.array(_F32, (h, n), "W1")
    b1 = r.array(_F32, (h,), "b1")
    W2 = r.array(_F32, (C, h), "W2")
    b2 = r.array(_F32, (C,), "b2")
    r.done()
    return Backbone(W1, b1, W2, b2)


# --- dataset --------------------------------------------------------------


def dataset_to_bytes(d: Dataset) -> bytes:
    return (_header(MAGIC_DATASET) + struct.pack("<IIIB", len(d), d.W, d.C, SPLITS.index(d.split))
            + _f32(d.images) + np.ascontiguousarray(d.labels, dtype=_U32).tobytes())


def dataset_from_bytes(buf: bytes) -> Dataset:
    r = _Reader(buf, MAGIC_DATASET)
    N, W, C, split = r.unpack("<IIIB", "header")
    if split >= len(SPLITS):
        raise FormatError(f"unknown split tag {split}")
    images = r.array(_F32, (N, W * W), "images")
    labels = r.array(_U32, (N,), "labels").astype(np.int64)
    r.done()
    return Dataset(images, labels, W, C, SPLITS[split])


# --- embeddings -----------------------------------------------------------


def embeddings_to_bytes(e: LabeledEmbeddings) -> bytes:
    ident = e.backbone_id.encode("utf-8")
    K, d = e.vectors.shape
    return (_header(MAGIC_EMBEDDINGS) + struct.pack("<IIIBH", K, d, e.C, e.layer.tag, len(ident)) + ident
            + _f32(e.vectors) + np.ascontiguousarray(e.labels, dtype=_U32).tobytes())


def embeddings_header_size(backbone_id: str) -> int:
    return 8 + struct.calcsize("<IIIBH") + len(backbone_id.encode("utf-8"))


def embeddings_from_bytes(buf: bytes) -> LabeledEmbeddings:
    r = _Reader(buf, MAGIC_EMBEDDINGS)
    K, d, C, layer, id_len = r.unpack("<IIIBH", "header")
    ident = r.take(id_len, "backbone id").decode("utf-8")
    vectors = r.array(_F32, (K, d), "vectors")
    labels = r.array(_U32, (K,), "labels").astype(np.int64)
    r.done()
    return LabeledEmbeddings(vectors, labels, EmbeddingLayer.from_tag(layer), ident, C)


# --- cache ----------------------------------------------------------------


def cache_to_bytes(c: Cache) -> bytes:
    t = c.key_transform
    out = [_header(MAGIC_CACHE), struct.pack("<IIIdBB", c.K, c.d, c.C, c.theta, c.layer.tag, t is not None)]
    if t is not None:
        out += [struct.pack("<II", t.d_in, t.d_out), _f32(t.mean), _f32(t.components)]
    out += [_f32(c.keys), _f32(c.values)]
    return b"".join(out)


def cache_from_bytes(buf: bytes) -> Cache:
    r = _Reader(buf, MAGIC_CACHE)
    K, d, C, theta, layer, has_t = r.unpack("<IIIdBB", "header")
    t = None
    if has_t:
        d_in, d_out = r.unpack("<II", "transform header")
        mean = r.array(_F32, (d_in,), "transform mean")
        comps = r.array(_F32, (d_out, d_in), "transform components")
        t = PcaTransform(mean, comps)
    keys = r.array(_F32, (K, d), "keys")
    values = r.array(_F32, (K, C), "values")
    r.done()
    return Cache(keys, values, theta, EmbeddingLayer.from_tag(layer), t)


# --- path helpers ---------------------------------------------------------

_WRITERS = {Backbone: backbone_to_bytes, Dataset: dataset_to_bytes,
            LabeledEmbeddings: embeddings_to_bytes, Cache: cache_to_bytes}
_READERS = {MAGIC_BACKBONE: backbone_from_bytes, MAGIC_DATASET: dataset_from_bytes,
            MAGIC_EMBEDDINGS: embeddings_from_bytes, MAGIC_CACHE: cache_from_bytes}


def to_bytes(obj) -> bytes:
    try:
        return _WRITERS[type(obj)](obj)
    except KeyError:
        raise TypeError(f"cannot serialize {type(obj).__name__}") from None


def save(obj, path) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(obj))
    return path


def load(path, expect: bytes | None = None):
    """Load any package file, dispatching on its magic."""
    buf = Path(path).read_bytes()
    magic = buf[:4]
    if expect is not None and magic != expect:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {expect!r}")
    try:
        reader = _READERS[magic]
    except KeyError:
        raise FormatError(f"{path}: unrecognized magic {magic!r}") from None
    return reader(buf)


def load_backbone(path) -> Backbone:
    return load(path, MAGIC_BACKBONE)


def load_dataset(path) -> Dataset:
    return load(path, MAGIC_DATASET)


def load_embeddings(path) -> LabeledEmbeddings:
    return load(path, MAGIC_EMBEDDINGS)


def load_cache(path) -> Cache:
    return load(path, MAGIC_CACHE)
