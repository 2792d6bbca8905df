import math
from types import SimpleNamespace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epicache.backbone import Backbone, EmbeddingLayer, embed
from epicache.cache import (
    CONTINUOUS,
    DEFAULT_THETA_GRID,
    Cache,
    CacheModel,
    CacheTargetLoss,
    Knn,
    build_cache,
    key_storage_bytes,
    normalize_query,
    parse_method,
    predict,
    prediction_jacobian,
    select_theta,
    similarity_scores,
    tune_theta,
)
from epicache.datasets import Dataset
from epicache.errors import DegenerateQueryError, ParameterError, ShapeError

from oracles import brute_force_cache_prediction


def emb(vectors, labels, C=None, layer=EmbeddingLayer.HIDDEN):
    labels = np.asarray(labels)
    return SimpleNamespace(vectors=np.asarray(vectors, dtype=float), labels=labels,
                           layer=layer, C=C or int(labels.max()) + 1)


def random_cache(rng, K=None, d=None, C=None, theta=None):
    K = K or int(rng.integers(1, 21))
    d = d or int(rng.integers(1, 9))
    C = C or int(rng.integers(2, 6))
    v = rng.normal(size=(K, d))
    v[np.linalg.norm(v, axis=1) == 0] = 1.0
    return build_cache(emb(v, rng.integers(C, size=K), C), theta or float(rng.uniform(1, 90)))


def unit(rng, d):
    q = rng.normal(size=d)
    return q / np.linalg.norm(q)


class TestBuildCache:
    def test_three_four_five(self):
        c = build_cache(emb([[3.0, 4.0]], [1], C=2), theta=10)
        np.testing.assert_allclose(c.keys[0], [0.6, 0.8], rtol=1e-7)
        np.testing.assert_array_equal(c.values[0], [0, 1])

    def test_unit_rows_unchanged(self):
        c = build_cache(emb([[1.0, 0.0], [0.0, 1.0]], [0, 1]))
        np.testing.assert_array_equal(c.keys, [[1, 0], [0, 1]])

    def test_order_preserved(self):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(10, 3))
        y = rng.integers(4, size=10)
        c = build_cache(emb(v, y, 4))
        np.testing.assert_array_equal(np.argmax(c.values, 1), y)
        np.testing.assert_allclose(c.keys, v / np.linalg.norm(v, axis=1, keepdims=True), rtol=1e-6)

    def test_zero_row_identified(self):
        with pytest.raises(DegenerateQueryError, match="row 2"):
            build_cache(emb([[1, 0], [0, 1], [0, 0]], [0, 1, 0]))

    def test_invariants_enforced(self):
        with pytest.raises(ParameterError):
            Cache(np.array([[2.0, 0.0]]), np.array([[1.0]]))
        with pytest.raises(ParameterError):
            Cache(np.array([[1.0, 0.0]]), np.array([[0.5, 0.6]]))
        with pytest.raises(ParameterError):
            Cache(np.array([[1.0, 0.0]]), np.array([[1.0]]), theta=0.0)

    def test_full_imagenet_scale_storage(self):
        # 1.28M x 2048 float32 keys
        assert key_storage_bytes(1_281_167, 2048) / 1e9 == pytest.approx(10.5, abs=0.05)


class TestNormalizeQuery:
    def test_basic(self):
        np.testing.assert_array_equal(normalize_query([0.0, 5.0]), [0.0, 1.0])
        assert abs(np.linalg.norm(normalize_query([1.0, 1.0])) - 1) < 1e-12

    def test_idempotent(self):
        q = normalize_query([3.0, -2.0, 7.0])
        np.testing.assert_allclose(normalize_query(q), q, rtol=0, atol=1e-15)

    def test_zero(self):
        with pytest.raises(DegenerateQueryError):
            normalize_query([0.0, 0.0])


class TestSimilarity:
    def test_max_at_matching_key(self):
        rng = np.random.default_rng(1)
        c = random_cache(rng, K=12, d=5, theta=10)
        j = 7
        s = similarity_scores(c, c.keys[j].astype(float))
        assert np.argmax(s) == j or np.isclose(s[np.argmax(s)], s[j])

    def test_small_theta_flat(self):
        rng = np.random.default_rng(2)
        c = random_cache(rng, K=15, d=4, theta=0.001)
        s = similarity_scores(c, unit(rng, 4))
        assert s.max() / s.min() < 1.01

    def test_ratio_is_e(self):
        c = build_cache(emb([[1, 0], [0, 1]], [0, 1]), theta=1.0)
        s = similarity_scores(c, [1.0, 0.0])
        assert s[0] / s[1] == pytest.approx(float(mpmath.e), rel=1e-14)

    def test_no_overflow_at_large_theta(self):
        c = build_cache(emb([[1, 0], [0, 1]], [0, 1]), theta=1e6)
        s = similarity_scores(c, [1.0, 0.0])
        assert np.all(np.isfinite(s)) and s[0] == 1.0

    def test_shape_error(self):
        c = build_cache(emb([[1, 0], [0, 1]], [0, 1]))
        with pytest.raises(ShapeError):
            similarity_scores(c, [1.0, 0.0, 0.0])


class TestPredict:
    def test_single_entry(self):
        c = build_cache(emb([[1.0, 2.0]], [2], C=4))
        for q in ([1.0, 0.0], [0.0, -1.0]):
            np.testing.assert_array_equal(predict(c, q), [0, 0, 1, 0])

    def test_two_keys_theta_one(self):
        c = build_cache(emb([[1, 0], [0, 1]], [0, 1]), theta=1.0)
        e = mpmath.e
        expected = [float(e / (e + 1)), float(1 / (e + 1))]
        np.testing.assert_allclose(predict(c, [1.0, 0.0]), expected, rtol=1e-14)
        np.testing.assert_allclose(expected, [0.7311, 0.2689], atol=5e-5)

    def test_knn_equals_continuous_at_K(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            c = random_cache(rng)
            q = unit(rng, c.d)
            np.testing.assert_allclose(predict(c, q, Knn(c.K)), predict(c, q, CONTINUOUS), rtol=0, atol=1e-12)

    def test_knn_k_too_large(self):
        c = build_cache(emb([[1, 0], [0, 1]], [0, 1]))
        with pytest.raises(ParameterError):
            predict(c, [1.0, 0.0], Knn(3))

    def test_knn_restricts_to_nearest(self):
        c = build_cache(emb([[1, 0], [0.9, 0.1], [0, 1]], [0, 0, 1]), theta=1.0)
        np.testing.assert_array_equal(predict(c, [1.0, 0.0], Knn(2)), [1.0, 0.0])

    def test_knn_tie_prefers_lower_index(self):
        c = build_cache(emb([[0, 1], [0, 1], [1, 0]], [0, 1, 0]), theta=5.0)
        np.testing.assert_array_equal(predict(c, [0.0, 1.0], Knn(1)), [1.0, 0.0])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            c = random_cache(rng)
            q = unit(rng, c.d)
            np.testing.assert_allclose(predict(c, q), brute_force_cache_prediction(c, q), rtol=1e-10, atol=0)

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        c = random_cache(rng, K=15, d=5)
        Q = np.stack([unit(rng, 5) for _ in range(6)])
        P = predict(c, Q, Knn(4))
        for i in range(6):
            np.testing.assert_allclose(P[i], predict(c, Q[i], Knn(4)), rtol=0, atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_output_is_distribution(self, seed):
        rng = np.random.default_rng(seed)
        c = random_cache(rng)
        p = predict(c, unit(rng, c.d), Knn(int(rng.integers(1, c.K + 1))))
        assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        c = random_cache(rng)
        perm = rng.permutation(c.K)
        c2 = Cache(c.keys[perm], c.values[perm], c.theta, c.layer)
        q = unit(rng, c.d)
        np.testing.assert_allclose(predict(c2, q), predict(c, q), rtol=0, atol=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
    def test_scale_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        c = random_cache(rng)
        e = rng.normal(size=c.d)
        if np.linalg.norm(e) == 0:
            return
        a = predict(c, normalize_query(scale * e))
        b = predict(c, normalize_query(e))
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_theta_sharpening(self):
        rng = np.random.default_rng(6)
        checked = 0
        for _ in range(200):
            c = random_cache(rng, K=10, d=6, C=4, theta=1e4)
            q = unit(rng, 6)
            dots = c.keys.astype(float) @ q
            top2 = np.sort(dots)[-2:]
            if top2[1] - top2[0] <= 0.01:
                continue
            checked += 1
            assert np.argmax(predict(c, q)) == np.argmax(c.values[np.argmax(dots)])
        assert checked > 50


def test_parse_method():
    assert parse_method("continuous") == CONTINUOUS
    assert parse_method("50-nn") == Knn(50)
    assert parse_method("knn50") == Knn(50)
    with pytest.raises(ParameterError):
        parse_method("nearest")


class TestTuneTheta:
    def _setup(self):
        m = Backbone(np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
        c = build_cache(emb([[1.0, 0.1], [0.1, 1.0]], [0, 1]), theta=50)
        val = Dataset(np.array([[0.9, 0.2, 0, 0], [0.1, 0.8, 0, 0]])[:, :4], np.array([0, 1]), 2, 2, "val")
        # backbone takes 2 inputs; widen W1 so it accepts the 4-pixel images
        m = Backbone(np.hstack([np.eye(2), np.zeros((2, 2))]), np.zeros(2), np.eye(2), np.zeros(2))
        return m, c, val

    def test_default_grid(self):
        assert DEFAULT_THETA_GRID == (10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0)

    def test_singleton(self):
        m, c, val = self._setup()
        assert tune_theta(c, m, val, [42.0]) == 42.0

    def test_tie_returns_smaller(self):
        m, c, val = self._setup()
        # both thetas classify everything correctly
        assert tune_theta(c, m, val, [50.0, 20.0]) == 20.0
        assert tune_theta(c, m, val) == 10.0

    def test_select_theta(self):
        assert select_theta([10, 20, 30], [0.5, 0.7, 0.7]) == 20
        with pytest.raises(ParameterError):
            select_theta([], [])

    def test_empty_grid(self):
        m, c, val = self._setup()
        with pytest.raises(ParameterError):
            tune_theta(c, m, val, [])


def small_model(rng, n=4, h=3, C=2):
    return Backbone(rng.normal(size=(h, n)), rng.normal(size=h) + 0.5,
                    rng.normal(size=(C, h)), rng.normal(size=C))


def fd_jacobian(f, x, step=1e-5):
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((f(x + e) - f(x - e)) / (2 * step))
    return np.stack(cols, axis=1)


class TestJacobian:
    def test_single_entry_is_zero(self):
        rng = np.random.default_rng(7)
        m = small_model(rng)
        c = build_cache(emb([[1.0, 2.0, 0.5]], [1], C=2))
        J = prediction_jacobian(c, m, np.array([0.2, 0.4, 0.6, 0.8]))
        assert np.all(J == 0)

    @pytest.mark.parametrize("layer", list(EmbeddingLayer))
    def test_finite_differences(self, layer):
        rng = np.random.default_rng(8)
        done = 0
        while done < 20:
            m = small_model(rng)
            x = rng.random(4)
            pre = m.W1.astype(float) @ x + m.b1
            if np.any(np.abs(pre) < 1e-3) or np.all(pre < 0):
                continue
            d = 3 if layer is EmbeddingLayer.HIDDEN else 2
            c = build_cache(emb(np.abs(rng.normal(size=(5, d))), [0, 1, 0, 1, rng.integers(2)], 2, layer),
                            theta=float(rng.uniform(1, 10)))
            cm = CacheModel(m, c)
            J = prediction_jacobian(c, m, x)
            fd = fd_jacobian(cm.predict_proba, x)
            if np.abs(fd).max() < 1e-6:
                continue  # saturated, nothing to compare
            assert np.max(np.abs(J - fd)) / max(np.abs(fd).max(), 1e-12) < 1e-4
            np.testing.assert_allclose(J.sum(axis=0), 0, atol=1e-9)
            done += 1

    def test_loss_gradient_matches_jacobian(self):
        rng = np.random.default_rng(9)
        m = small_model(rng)
        x = rng.random(4)
        c = build_cache(emb(np.abs(rng.normal(size=(6, 3))), [0, 1, 0, 1, 1, 0], 2), theta=5.0)
        cm = CacheModel(m, c)
        p = cm.predict_proba(x)
        J = prediction_jacobian(c, m, x)
        for t in (0, 1):
            np.testing.assert_allclose(cm.loss_gradient(x, t), -J[t] / p[t], rtol=1e-9, atol=1e-13)

    def test_loss_value(self):
        rng = np.random.default_rng(10)
        m = small_model(rng)
        x = rng.random(4)
        c = build_cache(emb(np.abs(rng.normal(size=(6, 3))), [0, 1, 0, 1, 1, 0], 2), theta=5.0)
        p = CacheModel(m, c).predict_proba(x)
        loss = CacheTargetLoss(c, 1)
        assert loss.value(embed(m, x, c.layer)) == pytest.approx(-math.log(p[1]), rel=1e-12)
