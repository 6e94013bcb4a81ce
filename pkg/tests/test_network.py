"""MLP 前向、损失、解析梯度与评估测试"""

import math

import numpy as np
import pytest

from dp_fedsam.data import synth_dataset
from dp_fedsam.errors import ModelError
from dp_fedsam.models import Activation, Batch, ModelSpec
from dp_fedsam.network import evaluate, forward, init_params, loss, loss_and_grad, unflatten
from dp_fedsam.optimizer import sam_perturbation


def _finite_difference(params, batch, spec, h=1e-5):
    grad = np.empty_like(params)
    for i in range(params.shape[0]):
        step = np.zeros_like(params)
        step[i] = h
        grad[i] = (loss(params + step, batch, spec) - loss(params - step, batch, spec)) / (2 * h)
    return grad


def _relative_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)


class TestInitParams:
    def test_deterministic(self):
        spec = ModelSpec((2, 3, 2))
        np.testing.assert_array_equal(init_params(spec, 7), init_params(spec, 7))

    def test_parameter_count(self):
        spec = ModelSpec((2, 3, 2))
        assert spec.parameter_count == 17
        assert init_params(spec, 0).shape == (17,)

    def test_init_scale(self):
        params = init_params(ModelSpec((4, 4)), 1)
        assert np.all(np.abs(params) <= 0.5)

    def test_unflatten_layout(self):
        spec = ModelSpec((2, 3, 2))
        params = np.arange(17, dtype=float)
        (w0, b0), (w1, b1) = unflatten(params, spec)
        assert w0.shape == (2, 3) and b0.tolist() == [6, 7, 8]
        assert w1.shape == (3, 2) and b1.tolist() == [15, 16]

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            unflatten(np.zeros(5), ModelSpec((2, 3, 2)))


class TestLoss:
    def test_zero_network_two_classes(self):
        spec = ModelSpec((3, 4, 2))
        batch = Batch(np.random.default_rng(0).normal(size=(5, 3)), np.array([0, 1, 0, 1, 1]))
        assert loss(np.zeros(spec.parameter_count), batch, spec) == pytest.approx(math.log(2), abs=1e-12)

    def test_equal_logits(self):
        spec = ModelSpec((2, 5))
        batch = Batch(np.array([[1.0, -2.0]]), np.array([3]))
        value, grad = loss_and_grad(np.zeros(spec.parameter_count), batch, spec)
        assert value == pytest.approx(math.log(5), abs=1e-12)
        assert grad.shape == (spec.parameter_count,)

    def test_overflow_names_layer(self):
        spec = ModelSpec((2, 3, 2))
        params = np.full(spec.parameter_count, 1e308)
        with pytest.raises(ModelError) as info:
            loss_and_grad(params, Batch(np.ones((1, 2)), np.array([0])), spec)
        assert info.value.layer == 0

    def test_feature_dimension_mismatch(self):
        spec = ModelSpec((3, 2))
        with pytest.raises(ValueError):
            loss_and_grad(np.zeros(spec.parameter_count), Batch(np.ones((1, 4)), np.array([0])), spec)

    def test_permuted_batch_gives_same_loss(self, tanh_spec):
        rng = np.random.default_rng(5)
        params = init_params(tanh_spec, 5)
        features = rng.normal(size=(40, 4))
        labels = rng.integers(0, 3, size=40)
        order = rng.permutation(40)
        value = loss(params, Batch(features, labels), tanh_spec)
        assert loss(params, Batch(features[order], labels[order]), tanh_spec) == pytest.approx(value, rel=1e-12)

    def test_replay_is_bit_identical(self, tanh_spec, blobs):
        params = init_params(tanh_spec, 6)
        first = loss_and_grad(params, blobs.batch(), tanh_spec)
        second = loss_and_grad(params, blobs.batch(), tanh_spec)
        assert first[0] == second[0]
        np.testing.assert_array_equal(first[1], second[1])

    def test_negative_label_rejected(self):
        with pytest.raises(ValueError, match="标签"):
            Batch(np.ones((2, 3)), np.array([0, -1]))


class TestGradient:
    @pytest.mark.parametrize("seed", range(100))
    def test_matches_finite_difference(self, seed):
        spec = ModelSpec((3, 5, 4, 3), Activation.TANH)
        rng = np.random.default_rng(seed)
        params = init_params(spec, seed)
        batch = Batch(rng.normal(size=(6, 3)), rng.integers(0, 3, size=6))

        _, analytic = loss_and_grad(params, batch, spec)
        assert _relative_error(analytic, _finite_difference(params, batch, spec)) < 1e-6

        perturbed = params + sam_perturbation(analytic, 0.05)
        _, analytic_p = loss_and_grad(perturbed, batch, spec)
        assert _relative_error(analytic_p, _finite_difference(perturbed, batch, spec)) < 1e-6

    def test_relu_away_from_kinks(self):
        spec = ModelSpec((3, 4, 2), Activation.RELU)
        rng = np.random.default_rng(3)
        params = init_params(spec, 3)
        batch = Batch(rng.normal(size=(4, 3)), np.array([0, 1, 1, 0]))
        _, analytic = loss_and_grad(params, batch, spec)
        assert _relative_error(analytic, _finite_difference(params, batch, spec, h=1e-6)) < 1e-5


class TestEvaluate:
    def test_perfect_predictions(self, tanh_spec):
        rng = np.random.default_rng(0)
        params = init_params(tanh_spec, 0)
        features = rng.normal(size=(50, 4))
        labels = np.argmax(forward(params, features, tanh_spec), axis=1)
        accuracy, _ = evaluate(params, Batch(features, labels), tanh_spec)
        assert accuracy == 1.0

    def test_ties_resolve_to_lowest_index(self):
        spec = ModelSpec((2, 3))
        params = np.zeros(spec.parameter_count)
        accuracy, _ = evaluate(params, Batch(np.ones((2, 2)), np.array([0, 0])), spec)
        assert accuracy == 1.0

    def test_single_example(self, tanh_spec):
        accuracy, _ = evaluate(init_params(tanh_spec, 1), Batch(np.ones((1, 4)), np.array([2])), tanh_spec)
        assert accuracy in (0.0, 1.0)

    def test_random_params_on_uninformative_data(self):
        ds = synth_dataset(classes=2, dims=5, n=10_000, separation=0.0, seed=4)
        spec = ModelSpec((5, 8, 2))
        accuracy, _ = evaluate(init_params(spec, 9), ds.batch(), spec)
        assert 0.4 <= accuracy <= 0.6

    def test_sequence_of_batches_matches_whole(self, tanh_spec, blobs):
        params = init_params(tanh_spec, 2)
        whole = evaluate(params, blobs.batch(), tanh_spec)
        halves = [blobs.batch(np.arange(0, 100)), blobs.batch(np.arange(100, 300))]
        parts = evaluate(params, halves, tanh_spec)
        assert parts[0] == pytest.approx(whole[0])
        assert parts[1] == pytest.approx(whole[1], rel=1e-12)

    def test_empty_dataset(self, tanh_spec):
        with pytest.raises(ValueError):
            evaluate(init_params(tanh_spec, 0), [], tanh_spec)
