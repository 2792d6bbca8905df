import struct
from types import SimpleNamespace

import numpy as np
import pytest

from epicache import fileio
from epicache.backbone import EmbeddingLayer, init_backbone
from epicache.cache import build_cache
from epicache.compression import Pca, compress_cache
from epicache.datasets import LabeledEmbeddings, extract_embeddings, generate_dataset
from epicache.errors import FormatError, TruncatedFileError, UnsupportedVersionError


@pytest.fixture(scope="module")
def objects():
    tr, _, _ = generate_dataset(C=3, per_class=20, W=8, seed=0)
    bb = init_backbone(64, 6, 3, seed=0)
    emb = extract_embeddings(bb, tr, "hidden")
    rng = np.random.default_rng(0)
    e2 = SimpleNamespace(vectors=rng.normal(size=(30, 6)), labels=np.arange(30) % 3,
                         layer=EmbeddingLayer.HIDDEN, C=3)
    cache = build_cache(e2, theta=37.5)
    return dict(backbone=bb, dataset=tr, embeddings=emb, cache=cache, pca_cache=compress_cache(cache, Pca(3)))


def same(a, b):
    return fileio.to_bytes(a) == fileio.to_bytes(b)


@pytest.mark.parametrize("kind", ["backbone", "dataset", "embeddings", "cache", "pca_cache"])
def test_round_trip_bitwise(objects, kind, tmp_path):
    obj = objects[kind]
    path = fileio.save(obj, tmp_path / kind)
    back = fileio.load(path)
    assert type(back) is type(obj)
    assert same(back, obj)
    assert path.read_bytes() == fileio.to_bytes(back)


def test_cache_fields_preserved(objects, tmp_path):
    c = objects["pca_cache"]
    back = fileio.load_cache(fileio.save(c, tmp_path / "c"))
    assert back.theta == 37.5 and back.layer is c.layer
    assert back.key_transform.components.tobytes() == c.key_transform.components.tobytes()
    assert back.keys.tobytes() == c.keys.tobytes()


def test_embeddings_size_arithmetic(objects):
    e = objects["embeddings"]
    K, d = e.vectors.shape
    buf = fileio.to_bytes(e)
    assert len(buf) == fileio.embeddings_header_size(e.backbone_id) + K * d * 4 + K * 4
    assert fileio.embeddings_header_size("x" * 64) == 4 + 4 + 12 + 1 + 2 + 64


def test_embeddings_unicode_id():
    e = LabeledEmbeddings(np.ones((2, 2)), np.array([0, 1]), "probs", "réseau", 2)
    back = fileio.embeddings_from_bytes(fileio.to_bytes(e))
    assert back.backbone_id == "réseau"


def test_wrong_magic(objects, tmp_path):
    p = fileio.save(objects["backbone"], tmp_path / "b")
    with pytest.raises(FormatError):
        fileio.load_cache(p)
    bad = tmp_path / "junk"
    bad.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        fileio.load(bad)


def test_future_version(objects):
    buf = bytearray(fileio.to_bytes(objects["cache"]))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(UnsupportedVersionError, match="version 2"):
        fileio.cache_from_bytes(bytes(buf))


@pytest.mark.parametrize("kind", ["backbone", "dataset", "embeddings", "cache"])
def test_truncation_reports_offset(objects, kind):
    buf = fileio.to_bytes(objects[kind])
    cut = len(buf) - 3
    reader = {"backbone": fileio.backbone_from_bytes, "dataset": fileio.dataset_from_bytes,
              "embeddings": fileio.embeddings_from_bytes, "cache": fileio.cache_from_bytes}[kind]
    with pytest.raises(TruncatedFileError) as info:
        reader(buf[:cut])
    assert 0 < info.value.offset <= cut


def test_truncated_header():
    with pytest.raises(TruncatedFileError) as info:
        fileio.backbone_from_bytes(b"EPBB\x01\x00")
    assert info.value.offset == 4


def test_trailing_bytes(objects):
    with pytest.raises(FormatError):
        fileio.backbone_from_bytes(fileio.to_bytes(objects["backbone"]) + b"\x00")


def test_unserializable():
    with pytest.raises(TypeError):
        fileio.to_bytes(object())
