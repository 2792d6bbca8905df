import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epicache.corruptions import (
    CATEGORIES,
    Corruption,
    CorruptionSuite,
    apply_corruption,
    compute_ce,
    corrupt_batch,
    default_suite,
    evaluate_corruption_robustness,
    severity1_normalized_linf,
)
from epicache.datasets import Dataset
from epicache.errors import FormatError, ParameterError, UndefinedCEError, UnsupportedVersionError

from oracles import reference_ce


def suite_with(**override):
    base = {c.name: c for c in default_suite().corruptions}
    for name, params in override.items():
        base[name] = Corruption(name, base[name].category, params)
    return CorruptionSuite(tuple(base.values()), 2020)


def image(seed=0, W=16):
    return np.random.default_rng(seed).random(W * W)


class TestSuite:
    def test_default_structure(self):
        s = default_suite()
        assert len(s.corruptions) == 8
        cats = [c.category for c in s.corruptions]
        assert all(cats.count(c) == 2 for c in CATEGORIES)

    def test_text_round_trip(self, tmp_path):
        s = default_suite()
        s.save(tmp_path / "suite.txt")
        t = CorruptionSuite.load(tmp_path / "suite.txt")
        assert t == s

    def test_bad_header(self):
        with pytest.raises(FormatError):
            CorruptionSuite.from_text("hello 1\n")
        text = default_suite().to_text().replace("corruption-suite 1", "corruption-suite 9")
        with pytest.raises(UnsupportedVersionError):
            CorruptionSuite.from_text(text)

    def test_non_monotone_rejected(self):
        with pytest.raises(ParameterError):
            Corruption("gaussian_noise", "noise", (0.1, 0.2, 0.2, 0.3, 0.4))
        with pytest.raises(ParameterError):
            Corruption("gaussian_noise", "noise", (0.1, 0.2, 0.3, 0.4))

    def test_unknown_name(self):
        with pytest.raises(ParameterError):
            Corruption("fog", "weather", (1, 2, 3, 4, 5))
        with pytest.raises(ParameterError):
            apply_corruption(image(), "fog", 1)

    def test_missing_category(self):
        cs = [c for c in default_suite().corruptions if c.category != "blur"]
        with pytest.raises(ParameterError):
            CorruptionSuite(tuple(cs))

    def test_severity_range(self):
        with pytest.raises(ParameterError):
            apply_corruption(image(), "gaussian_noise", 0)
        with pytest.raises(ParameterError):
            apply_corruption(image(), "gaussian_noise", 6)


class TestKernels:
    def test_contrast_identity(self):
        s = suite_with(contrast_scale=(1.0, 0.8, 0.6, 0.4, 0.2))
        x = image()
        np.testing.assert_allclose(apply_corruption(x, "contrast_scale", 1, suite=s), x, atol=1e-15)

    def test_pixelate_full_block_is_mean(self):
        s = suite_with(pixelate=(2, 4, 8, 12, 16))
        x = image()
        out = apply_corruption(x, "pixelate", 5, suite=s)
        np.testing.assert_allclose(out, np.full_like(x, x.mean()), atol=1e-14)

    def test_pixelate_partial_blocks(self):
        x = np.arange(16.0).reshape(4, 4)
        s = suite_with(pixelate=(3, 4, 5, 6, 7))
        out = apply_corruption((x / 15).ravel(), "pixelate", 1, suite=s).reshape(4, 4) * 15
        np.testing.assert_allclose(out[0, 0], x[:3, :3].mean())
        np.testing.assert_allclose(out[3, 3], x[3, 3])
        np.testing.assert_allclose(out[0, 3], x[:3, 3].mean())

    def test_brightness_clips(self):
        out = apply_corruption(np.full(64, 0.95), "brightness_shift", 1)
        np.testing.assert_array_equal(out, 1.0)

    def test_quantize_levels(self):
        out = apply_corruption(image(), "quantize", 5)
        L = default_suite().get("quantize").params[4]
        assert len(np.unique(out)) <= L

    def test_motion_blur_constant_rows(self):
        x = np.repeat(np.linspace(0, 1, 8), 8)  # each row constant
        np.testing.assert_allclose(apply_corruption(x, "motion_blur_horizontal", 3), x, atol=1e-15)

    @pytest.mark.parametrize("name", default_suite().names)
    def test_deterministic_and_clipped(self, name):
        x = image(1)
        a = apply_corruption(x, name, 3, seed=5)
        b = apply_corruption(x, name, 3, seed=5)
        assert a.tobytes() == b.tobytes()
        assert a.min() >= 0 and a.max() <= 1

    @pytest.mark.parametrize("name", default_suite().names)
    def test_weakest_severity_changes_image(self, name):
        x = image(2)
        assert np.abs(apply_corruption(x, name, 1, seed=0) - x).max() > 0

    def test_noise_depends_on_seed(self):
        x = image(3)
        assert not np.array_equal(apply_corruption(x, "gaussian_noise", 2, seed=0),
                                  apply_corruption(x, "gaussian_noise", 2, seed=1))

    def test_batch_rows_independent(self):
        X = np.stack([image(i) for i in range(4)])
        out = corrupt_batch(X, "impulse_noise", 2, seeds=[7, 8, 9, 10])
        np.testing.assert_array_equal(out[2], apply_corruption(X[2], "impulse_noise", 2, seed=9))

    def test_non_square_rejected(self):
        with pytest.raises(ParameterError):
            apply_corruption(np.zeros(10), "box_blur", 1)


class TestCE:
    def test_self_reference(self):
        e = [0.1, 0.2, 0.3, 0.4, 0.5]
        assert compute_ce(e, e) == 1.0

    def test_half(self):
        assert compute_ce([0.2] * 5, [0.4] * 5) == pytest.approx(0.5, abs=1e-15)

    def test_ratio_of_means_not_mean_of_ratios(self):
        m = [0.1, 0.1, 0.1, 0.1, 0.5]
        r = [0.1, 0.1, 0.1, 0.1, 0.6]
        ce = compute_ce(m, r)
        assert ce == pytest.approx(0.9 / 1.0, rel=1e-14)  # mean of ratios would be 0.9667
        assert ce != pytest.approx(np.mean(np.divide(m, r)))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=5, max_size=5),
           st.lists(st.floats(0.01, 1), min_size=5, max_size=5))
    def test_matches_exact_oracle(self, m, r):
        assert compute_ce(m, r) == pytest.approx(reference_ce(m, r), rel=1e-13)

    def test_zero_reference(self):
        with pytest.raises(UndefinedCEError, match="blur"):
            compute_ce([0.1] * 5, [0.0] * 5, "blur")

    def test_out_of_range(self):
        with pytest.raises(ParameterError):
            compute_ce([1.2] * 5, [0.5] * 5)


def threshold_model(pixel):
    def fn(X):
        p1 = (np.asarray(X)[:, pixel] > 0.5).astype(float)
        return np.stack([1 - p1, p1], axis=1)
    return fn


class TestEvaluate:
    def _data(self):
        rng = np.random.default_rng(4)
        X = rng.random((60, 64))
        y = (X[:, 0] > 0.5).astype(int)
        return Dataset(X, y, 8, 2, "test")

    def test_self_mce_is_one(self):
        d = self._data()
        fn = threshold_model(0)
        r = evaluate_corruption_robustness(fn, fn, default_suite(), d)
        assert r.mce == 1.0
        assert all(v == 1.0 for v in r.ce_per_corruption.values())

    def test_report_invariants(self):
        d = self._data()
        r = evaluate_corruption_robustness(threshold_model(0), threshold_model(1), default_suite(), d)
        assert abs(r.mce - np.mean(list(r.ce_per_corruption.values()))) < 1e-12
        assert np.all((r.raw_errors >= 0) & (r.raw_errors <= 1))
        assert r.raw_errors.shape == (8, 5)
        assert "mCE" in r.to_csv()

    def test_deterministic(self):
        d = self._data()
        a = evaluate_corruption_robustness(threshold_model(0), threshold_model(1), default_suite(), d)
        b = evaluate_corruption_robustness(threshold_model(0), threshold_model(1), default_suite(), d)
        assert a.to_json() == b.to_json()

    def test_severity1_magnitude_reported(self):
        r = severity1_normalized_linf(self._data().images, default_suite())
        assert set(r) == set(default_suite().names)
        assert all(v > 0 for v in r.values())
