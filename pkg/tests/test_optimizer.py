"""本地 SGD / SAM 训练测试"""

import numpy as np
import pytest

from dp_fedsam.config import OptimizerConfig
from dp_fedsam.models import ClientShard, OptimizerKind
from dp_fedsam.network import init_params, loss_and_grad
from dp_fedsam.optimizer import perturbed_gradient, run_local_round, sam_gradient, sam_perturbation


def _quadratic(w):
    return 0.5 * float(w @ w), w.copy()


class TestSamPerturbation:
    def test_unit_scaling(self):
        np.testing.assert_allclose(sam_perturbation(np.array([3.0, 4.0]), 0.5), [0.3, 0.4])

    def test_zero_gradient(self):
        np.testing.assert_array_equal(sam_perturbation(np.zeros(3), 0.5), np.zeros(3))

    @pytest.mark.parametrize("seed", range(10))
    def test_norm_equals_rho(self, seed):
        grad = np.random.default_rng(seed).normal(size=50)
        assert np.linalg.norm(sam_perturbation(grad, 1.0)) == pytest.approx(1.0, abs=1e-12)

    def test_negative_rho(self):
        with pytest.raises(ValueError):
            sam_perturbation(np.ones(2), -0.1)


class TestSamGradient:
    def test_quadratic_toy_loss(self):
        _, grad = perturbed_gradient(_quadratic, np.array([1.0, 0.0]), 0.1)
        np.testing.assert_allclose(grad, [1.1, 0.0], atol=1e-15)

    def test_rho_zero_reduces_to_plain_gradient(self, tanh_spec, blobs):
        params = init_params(tanh_spec, 0)
        batch = blobs.batch(np.arange(20))
        _, expected = loss_and_grad(params, batch, tanh_spec)
        np.testing.assert_array_equal(sam_gradient(params, batch, 0.0, tanh_spec), expected)

    def test_gradient_taken_at_perturbed_point(self, tanh_spec, blobs):
        params = init_params(tanh_spec, 1)
        batch = blobs.batch(np.arange(30))
        _, g = loss_and_grad(params, batch, tanh_spec)
        _, expected = loss_and_grad(params + 0.2 * g / np.linalg.norm(g), batch, tanh_spec)
        np.testing.assert_allclose(sam_gradient(params, batch, 0.2, tanh_spec), expected)


class TestRunLocalRound:
    def _shard(self, n=40):
        return ClientShard(3, np.arange(n))

    def test_single_full_batch_sgd_step(self, tanh_spec, blobs):
        cfg = OptimizerConfig(kind=OptimizerKind.SGD, learning_rate=0.05, local_steps=1, full_batch=True)
        params = init_params(tanh_spec, 0)
        shard = self._shard()
        delta, trace = run_local_round(params, shard, blobs, cfg, tanh_spec, rng_seed=0)
        value, grad = loss_and_grad(params, blobs.batch(shard.indices), tanh_spec)
        np.testing.assert_allclose(delta, -0.05 * grad, rtol=1e-12, atol=1e-15)
        assert trace == [pytest.approx(value)]

    def test_zero_learning_rate(self, tanh_spec, blobs):
        cfg = OptimizerConfig(learning_rate=0.0, local_steps=4)
        delta, trace = run_local_round(init_params(tanh_spec, 0), self._shard(), blobs, cfg, tanh_spec, 1)
        np.testing.assert_array_equal(delta, 0.0)
        assert len(trace) == 4

    @pytest.mark.parametrize("kind", list(OptimizerKind))
    def test_deterministic_per_seed(self, tanh_spec, blobs, kind):
        cfg = OptimizerConfig(kind=kind, local_steps=5, batch_size=8)
        params = init_params(tanh_spec, 0)
        first, _ = run_local_round(params, self._shard(), blobs, cfg, tanh_spec, 11)
        second, _ = run_local_round(params, self._shard(), blobs, cfg, tanh_spec, 11)
        np.testing.assert_array_equal(first, second)

    def test_shard_smaller_than_batch(self, tanh_spec, blobs):
        cfg = OptimizerConfig(local_steps=2, batch_size=64)
        delta, _ = run_local_round(init_params(tanh_spec, 0), self._shard(5), blobs, cfg, tanh_spec, 0)
        assert np.all(np.isfinite(delta))

    def test_momentum_update_passes_step_bound(self, tanh_spec, blobs):
        cfg = OptimizerConfig(learning_rate=0.1, local_steps=6, batch_size=8, momentum=0.5)
        delta, _ = run_local_round(init_params(tanh_spec, 0), self._shard(), blobs, cfg, tanh_spec, 2)
        assert np.linalg.norm(delta) > 0

    def test_sam_without_perturbation_follows_sgd_trajectory(self, tanh_spec, blobs):
        params = init_params(tanh_spec, 4)
        sam = OptimizerConfig(kind=OptimizerKind.SAM, rho=0.0, learning_rate=0.1, local_steps=6, batch_size=8)
        sgd = sam.model_copy(update={"kind": OptimizerKind.SGD})
        sam_delta, sam_trace = run_local_round(params, self._shard(), blobs, sam, tanh_spec, 9)
        sgd_delta, sgd_trace = run_local_round(params, self._shard(), blobs, sgd, tanh_spec, 9)
        np.testing.assert_array_equal(sam_delta, sgd_delta)
        assert sam_trace == sgd_trace

    def test_learning_rate_override(self, tanh_spec, blobs):
        cfg = OptimizerConfig(kind=OptimizerKind.SGD, learning_rate=0.1, local_steps=1, full_batch=True)
        params = init_params(tanh_spec, 0)
        full, _ = run_local_round(params, self._shard(), blobs, cfg, tanh_spec, 0)
        half, _ = run_local_round(params, self._shard(), blobs, cfg, tanh_spec, 0, learning_rate=0.05)
        np.testing.assert_allclose(half, 0.5 * full, rtol=1e-12, atol=1e-15)

    def test_empty_shard(self, tanh_spec, blobs):
        with pytest.raises(ValueError):
            run_local_round(
                init_params(tanh_spec, 0), ClientShard(0, np.array([], dtype=np.int64)), blobs,
                OptimizerConfig(), tanh_spec, 0,
            )

    def test_lr_decay_schedule(self):
        cfg = OptimizerConfig(learning_rate=0.1, lr_decay=0.5)
        assert cfg.lr_at(0) == 0.1
        assert cfg.lr_at(2) == pytest.approx(0.025)
