"""裁剪、加噪、稀疏化与聚合测试"""

import numpy as np
import pytest

from dp_fedsam.mechanism import (
    add_noise,
    aggregate,
    clip_factor,
    clip_update,
    privatize,
    randk_sparsify,
    topk_sparsify,
)
from dp_fedsam.models import Sparsifier


class TestClip:
    def test_factor_formula(self):
        assert clip_factor(np.array([0.0, 4.0]), 0.2) == pytest.approx(0.05)

    def test_no_clipping_below_threshold(self):
        assert clip_factor(np.array([0.1, 0.0]), 0.2) == 1.0

    def test_zero_update(self):
        assert clip_factor(np.zeros(4), 0.2) == 1.0

    def test_clip_update_examples(self):
        np.testing.assert_allclose(clip_update(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
        np.testing.assert_array_equal(clip_update(np.array([0.1, 0.0]), 1.0), [0.1, 0.0])

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            clip_factor(np.ones(2), 0.0)

    def test_randomized_properties(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            d = int(rng.integers(1, 20))
            delta = rng.normal(scale=rng.uniform(0.01, 10), size=d)
            C = rng.uniform(0.01, 5)
            clipped = clip_update(delta, C)
            assert np.linalg.norm(clipped) <= C * (1 + 1e-12)
            factor = clip_factor(delta, C)
            assert 0 < factor <= 1
            np.testing.assert_allclose(clipped, factor * delta)


class TestNoise:
    def test_zero_sigma_is_identity(self):
        delta = np.array([1.0, -2.0])
        np.testing.assert_array_equal(add_noise(delta, 1.0, 0.0, 4, np.random.default_rng(0)), delta)

    def test_variance_calibration(self):
        out = add_noise(np.zeros(100_000), 1.0, 1.0, 4, np.random.default_rng(1))
        assert out.var() == pytest.approx(0.25, abs=0.01)

    def test_variance_matches_formula_within_standard_errors(self):
        sigma, C, m = 0.95, 0.2, 5
        out = add_noise(np.zeros(1_000_000), C, sigma, m, np.random.default_rng(2))
        expected = sigma**2 * C**2 / m
        # 正态样本方差的标准误 ≈ var·sqrt(2/n)
        se = expected * np.sqrt(2.0 / out.size)
        assert abs(out.var() - expected) <= 3 * se

    def test_reproducible(self):
        a = add_noise(np.zeros(10), 1.0, 1.0, 2, np.random.default_rng(3))
        b = add_noise(np.zeros(10), 1.0, 1.0, 2, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)


class TestTopK:
    def test_example(self):
        sparse, mask = topk_sparsify(np.array([3.0, -5.0, 1.0, 0.5]), 2)
        np.testing.assert_array_equal(sparse, [3.0, -5.0, 0.0, 0.0])
        assert mask.tolist() == [True, True, False, False]

    def test_ties_keep_lower_index(self):
        _, mask = topk_sparsify(np.array([1.0, -1.0, 1.0]), 2)
        assert mask.tolist() == [True, True, False]

    def test_k_equals_d_identity(self):
        delta = np.random.default_rng(0).normal(size=7)
        np.testing.assert_array_equal(topk_sparsify(delta, 7)[0], delta)

    @pytest.mark.parametrize("k", [0, 5])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            topk_sparsify(np.ones(4), k)

    def test_randomized_against_sort_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10_000):
            d = int(rng.integers(1, 30))
            k = int(rng.integers(1, d + 1))
            delta = rng.normal(size=d)
            sparse, mask = topk_sparsify(delta, k)
            assert mask.sum() == k
            kept = np.sort(np.abs(delta[mask]))
            dropped = np.abs(delta[~mask])
            np.testing.assert_allclose(kept, np.sort(np.abs(delta))[-k:])
            if dropped.size:
                assert dropped.max() <= kept.min()
            np.testing.assert_array_equal(topk_sparsify(sparse, k)[0], sparse)


class TestRandK:
    def test_k_equals_d_identity(self):
        delta = np.arange(5, dtype=float)
        np.testing.assert_array_equal(randk_sparsify(delta, 5, np.random.default_rng(0)), delta)

    def test_retention_frequency(self):
        rng = np.random.default_rng(5)
        kept_first = sum(randk_sparsify(np.ones(2), 1, rng)[0] != 0 for _ in range(10_000))
        assert kept_first / 10_000 == pytest.approx(0.5, abs=0.02)

    def test_reproducible(self):
        delta = np.arange(1, 11, dtype=float)
        a = randk_sparsify(delta, 3, np.random.default_rng(9))
        b = randk_sparsify(delta, 3, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)
        assert np.count_nonzero(a) == 3


class TestPrivatize:
    def test_clipped_update_within_threshold(self):
        rng = np.random.default_rng(0)
        out = privatize(rng.normal(size=30) * 10, 0.2, 0.95, 5, rng, Sparsifier.TOPK, 12)
        assert np.linalg.norm(out.clipped) <= 0.2 * (1 + 1e-12)
        assert out.mask is not None and out.mask.sum() == 12
        assert np.count_nonzero(out.transmitted) == 12

    def test_clipping_disabled(self):
        delta = np.array([3.0, 4.0])
        out = privatize(delta, 0.2, 0.0, 1, np.random.default_rng(0), clip_enabled=False)
        assert out.clip_factor == 1.0
        np.testing.assert_array_equal(out.transmitted, delta)
        assert out.pre_clip_norm == pytest.approx(5.0)

    def test_randk_option(self):
        out = privatize(np.ones(10), 1.0, 0.0, 1, np.random.default_rng(0), Sparsifier.RANDK, 4)
        assert np.count_nonzero(out.transmitted) == 4


class TestAggregate:
    def test_unweighted_mean(self):
        np.testing.assert_allclose(aggregate([np.ones(3), 3 * np.ones(3)], 2), 2 * np.ones(3))

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([], 1)

    def test_adjacent_client_sets_sensitivity(self):
        rng = np.random.default_rng(7)
        for _ in range(1_000):
            M = int(rng.integers(2, 9))
            m = int(rng.integers(1, M + 1))
            C = rng.uniform(0.05, 2.0)
            d = int(rng.integers(1, 12))
            clipped = [clip_update(rng.normal(scale=5, size=d), C) for _ in range(m)]
            removed = int(rng.integers(0, m))
            neighbour = [u for i, u in enumerate(clipped) if i != removed] or [np.zeros(d)]
            gap = np.linalg.norm(aggregate(clipped, m) - aggregate(neighbour, m))
            assert gap <= C / m + 1e-12
