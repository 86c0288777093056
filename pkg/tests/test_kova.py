"""
Tests for kova.py - the Kalman-filter value optimizer
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from utilities.errors import GainComputationError
from utilities.kova import (
    BATCH_SIZE_NOISE,
    MAX_RATIO_NOISE,
    KovaConfig,
    NoiseModel,
    OptimizerState,
    init_state,
    kalman_gain,
    kova_step,
    loewner_decrease_check,
    observation_noise,
    predict,
    update,
    warm_start,
)
from utilities.targets import Batch
from utilities.valuefunc import ValueModel, forward, init_params
from utilities.verify import brute_force_argmin_ekf, linearized_argmin_ekf, random_spd

ZERO_NOISE = NoiseModel.zero_evolution()


def exact_config(observation=BATCH_SIZE_NOISE):
    return KovaConfig(learning_rate=1.0, noise=NoiseModel.zero_evolution(observation=observation))


class TestInitState:
    """Tests for init_state and warm_start"""

    def test_identity_covariance(self):
        """p₀=1, d=2 gives the 2×2 identity"""
        state = init_state(2, np.zeros(2), KovaConfig())
        np.testing.assert_array_equal(state.cov, np.eye(2))
        assert state.step_count == 0

    def test_scaled_covariance(self):
        """p₀=0.5, d=3 gives diag(0.5, 0.5, 0.5)"""
        state = init_state(3, np.ones(3), KovaConfig(initial_cov_scale=0.5))
        np.testing.assert_array_equal(state.cov, 0.5 * np.eye(3))
        np.testing.assert_array_equal(state.theta_hat, np.ones(3))

    def test_zero_dimension(self):
        """d=0 is rejected"""
        with pytest.raises(ValueError):
            init_state(0, np.zeros(0), KovaConfig())

    def test_length_mismatch(self):
        """θ₀ must have length d"""
        with pytest.raises(ValueError):
            init_state(3, np.zeros(2), KovaConfig())

    def test_state_is_read_only(self):
        """States cannot be mutated in place"""
        state = init_state(2, np.zeros(2), KovaConfig())
        with pytest.raises(ValueError):
            state.theta_hat[0] = 1.0

    def test_warm_start_resets_step_count(self):
        """Warm start copies θ̂ and P and resets t"""
        previous = OptimizerState(theta_hat=np.array([1.0, 2.0]), cov=np.diag([0.3, 0.4]), step_count=17)
        state = warm_start(previous)
        np.testing.assert_array_equal(state.theta_hat, previous.theta_hat)
        np.testing.assert_array_equal(state.cov, previous.cov)
        assert state.step_count == 0


class TestConfigValidation:
    """Tests for NoiseModel and KovaConfig validation"""

    def test_eta_must_be_below_one(self):
        with pytest.raises(ValueError):
            NoiseModel(eta=1.0)

    def test_unknown_observation_noise(self):
        with pytest.raises(ValueError):
            NoiseModel(observation='heteroscedastic')

    def test_learning_rate_range(self):
        with pytest.raises(ValueError):
            KovaConfig(learning_rate=0.0)
        with pytest.raises(ValueError):
            KovaConfig(learning_rate=1.5)


class TestPredict:
    """Tests for predict"""

    def test_zero_evolution_is_identity(self):
        """Zero evolution noise leaves P unchanged"""
        P = random_spd(np.random.default_rng(0), 3)
        state = OptimizerState(theta_hat=np.zeros(3), cov=P)
        np.testing.assert_array_equal(predict(state, ZERO_NOISE), P)

    def test_fading_memory(self):
        """η=0.01 gives P/0.99"""
        P = random_spd(np.random.default_rng(1), 3)
        state = OptimizerState(theta_hat=np.zeros(3), cov=P)
        np.testing.assert_allclose(predict(state, NoiseModel(eta=0.01)), P / 0.99, rtol=1e-14)

    def test_fading_memory_direct_formula(self):
        """η=0.1 matches P + (0.1/0.9)·P"""
        P = random_spd(np.random.default_rng(2), 3)
        state = OptimizerState(theta_hat=np.zeros(3), cov=P)
        np.testing.assert_allclose(predict(state, NoiseModel(eta=0.1)), P + (0.1 / 0.9) * P, rtol=1e-14)


class TestObservationNoise:
    """Tests for observation_noise"""

    def test_batch_size(self):
        """Batch-size noise with N=64 is diag of 64s"""
        batch = Batch(inputs=np.zeros((64, 1)), targets=np.zeros(64))
        np.testing.assert_array_equal(observation_noise(NoiseModel(), batch), 64.0 * np.eye(64))

    def test_max_ratio_unit_ratio(self):
        """Max-ratio with ratio 1, ε=0 equals batch-size noise"""
        batch = Batch(inputs=np.zeros((64, 1)), targets=np.zeros(64), ratios=np.ones(64))
        noise = NoiseModel(observation=MAX_RATIO_NOISE, epsilon=0.0)
        np.testing.assert_array_equal(np.diag(observation_noise(noise, batch)), np.full(64, 64.0))

    def test_max_ratio_half(self):
        """Ratio 0.5 doubles the noise"""
        batch = Batch(inputs=np.zeros((64, 1)), targets=np.zeros(64), ratios=np.full(64, 0.5))
        noise = NoiseModel(observation=MAX_RATIO_NOISE, epsilon=0.0)
        np.testing.assert_array_equal(np.diag(observation_noise(noise, batch)), np.full(64, 128.0))

    def test_max_ratio_large_ratio_floors_at_n(self):
        """Ratios above one never shrink the noise below N"""
        batch = Batch(inputs=np.zeros((4, 1)), targets=np.zeros(4), ratios=np.full(4, 3.0))
        noise = NoiseModel(observation=MAX_RATIO_NOISE)
        np.testing.assert_array_equal(np.diag(observation_noise(noise, batch)), np.full(4, 4.0))

    def test_zero_denominator(self):
        """ratio + ε = 0 is rejected"""
        batch = Batch(inputs=np.zeros((2, 1)), targets=np.zeros(2), ratios=[1.0, 0.0])
        with pytest.raises(ValueError):
            observation_noise(NoiseModel(observation=MAX_RATIO_NOISE, epsilon=0.0), batch)


class TestKalmanGain:
    """Tests for kalman_gain"""

    def test_scalar(self):
        """P=1, J=1, P_n=1 gives K=0.5"""
        K = kalman_gain(np.eye(1), np.eye(1), np.eye(1))
        np.testing.assert_allclose(K, [[0.5]])

    def test_zero_jacobian(self):
        """J=0 gives K=0"""
        K = kalman_gain(np.eye(3), np.zeros((3, 2)), np.eye(2))
        np.testing.assert_array_equal(K, np.zeros((3, 2)))

    def test_information_form(self, rng):
        """Gain equals (P^{-1} + J P_n^{-1} Jᵀ)^{-1} J P_n^{-1}"""
        for _ in range(20):
            P, P_n = random_spd(rng, 3), random_spd(rng, 2)
            J = rng.normal(size=(3, 2))
            reference = np.linalg.inv(np.linalg.inv(P) + J @ np.linalg.inv(P_n) @ J.T) @ J @ np.linalg.inv(P_n)
            np.testing.assert_allclose(kalman_gain(P, J, P_n), reference, atol=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            kalman_gain(np.eye(3), np.zeros((2, 2)), np.eye(2))

    def test_jitter_rescues_semidefinite_innovation(self):
        """A singular innovation matrix is factorized after diagonal loading"""
        K = kalman_gain(np.eye(2), np.zeros((2, 2)), np.zeros((2, 2)), jitter=1e-6)
        np.testing.assert_array_equal(K, np.zeros((2, 2)))

    def test_unfactorizable_innovation(self):
        """Failure after the retry raises GainComputationError"""
        with pytest.raises(GainComputationError) as excinfo:
            kalman_gain(np.eye(1), np.zeros((1, 2)), -np.eye(2), jitter=1e-9)
        assert excinfo.value.condition_number is not None


class TestUpdate:
    """Tests for update and kova_step"""

    def test_zero_innovation_keeps_theta(self, tabular_model):
        """Targets equal to predictions leave θ̂ unchanged and shrink P"""
        theta = np.array([1.0, -2.0, 0.5, 3.0])
        inputs = np.eye(4)
        batch = Batch(inputs=inputs, targets=forward(tabular_model, theta, inputs))
        state = OptimizerState(theta_hat=theta, cov=np.eye(4))
        new_state = update(state, batch, tabular_model, exact_config())
        np.testing.assert_allclose(new_state.theta_hat, theta, atol=1e-15)
        assert np.trace(new_state.cov) < np.trace(state.cov)
        assert new_state.step_count == 1

    def test_zero_prior_freezes_theta(self, tabular_model, rng):
        """p₀=0 with zero evolution noise never moves θ̂"""
        cfg = KovaConfig(initial_cov_scale=0.0, noise=ZERO_NOISE)
        state = init_state(4, np.ones(4), cfg)
        for _ in range(5):
            batch = Batch(inputs=rng.normal(size=(6, 4)), targets=rng.normal(size=6))
            state = update(state, batch, tabular_model, cfg)
        np.testing.assert_array_equal(state.theta_hat, np.ones(4))

    def test_linear_update_is_regularized_argmin(self, rng):
        """α=1 on a linear model lands on the regularized least-squares minimizer"""
        for _ in range(50):
            d, n = int(rng.integers(4, 17)), int(rng.integers(4, 33))
            model = ValueModel.tabular(d)
            batch = Batch(inputs=rng.normal(size=(n, d)), targets=rng.normal(size=n),
                          ratios=rng.uniform(0.2, 1.0, size=n))
            theta_prev = rng.normal(size=d)
            P = random_spd(rng, d)
            cfg = exact_config(MAX_RATIO_NOISE)
            new_state = update(OptimizerState(theta_hat=theta_prev, cov=P), batch, model, cfg)
            P_n = observation_noise(cfg.noise, batch)
            reference, report = brute_force_argmin_ekf(batch, model, theta_prev, P, P_n)
            assert report.passed
            assert np.max(np.abs(new_state.theta_hat - reference)) < 1e-8

    def test_nonlinear_update_is_linearized_argmin(self, small_mlp, rng):
        """α=1 on an MLP minimizes the objective with h linearized at θ̂"""
        for _ in range(10):
            batch = Batch(inputs=rng.normal(size=(6, 2)), targets=rng.normal(size=6))
            theta_prev = init_params(small_mlp, int(rng.integers(1000)), 0.5)
            P = random_spd(rng, small_mlp.param_dim, scale=0.1)
            cfg = exact_config()
            new_state = update(OptimizerState(theta_hat=theta_prev, cov=P), batch, small_mlp, cfg)
            reference = linearized_argmin_ekf(batch, small_mlp, theta_prev, P, 6.0 * np.eye(6))
            assert np.max(np.abs(new_state.theta_hat - reference)) < 1e-8

    def test_learning_rate_scales_step(self, tabular_model, linear_batch):
        """α scales the parameter correction"""
        state = init_state(4, np.zeros(4), KovaConfig())
        full = update(state, linear_batch, tabular_model, exact_config())
        half = update(state, linear_batch, tabular_model,
                      KovaConfig(learning_rate=0.5, noise=ZERO_NOISE))
        np.testing.assert_allclose(half.theta_hat, 0.5 * full.theta_hat, atol=1e-14)

    def test_diagnostics(self, tabular_model, linear_batch):
        """kova_step reports the quantities of the iteration"""
        state = init_state(4, np.zeros(4), KovaConfig())
        _, diagnostics = kova_step(state, linear_batch, tabular_model, KovaConfig())
        assert diagnostics.gain.shape == (4, 8)
        assert diagnostics.innovation_cov.shape == (8, 8)
        np.testing.assert_allclose(diagnostics.pred_cov, np.eye(4) / 0.99)
        np.testing.assert_allclose(diagnostics.residual, linear_batch.targets)

    def test_dimension_mismatch(self, linear_batch):
        """State and model dimensions must agree"""
        state = init_state(3, np.zeros(3), KovaConfig())
        with pytest.raises(ValueError):
            update(state, linear_batch, ValueModel.tabular(4), KovaConfig())

    def test_deterministic(self, small_mlp, mlp_params, rng):
        """Identical inputs give bitwise-identical successor states"""
        batch = Batch(inputs=rng.normal(size=(5, 2)), targets=rng.normal(size=5))
        state = init_state(small_mlp.param_dim, mlp_params, KovaConfig())
        first = update(state, batch, small_mlp, KovaConfig())
        second = update(state, batch, small_mlp, KovaConfig())
        assert np.array_equal(first.theta_hat, second.theta_hat)
        assert np.array_equal(first.cov, second.cov)


class TestCovarianceContract:
    """Tests for loewner_decrease_check and the covariance invariants"""

    def test_equal_matrices(self):
        P = random_spd(np.random.default_rng(0), 3)
        assert loewner_decrease_check(P, P)

    def test_increase_detected(self):
        P = random_spd(np.random.default_rng(0), 3)
        assert not loewner_decrease_check(P, P + np.eye(3))

    def test_symmetric_and_non_increasing(self, small_mlp, mlp_params, rng):
        """Every update keeps P symmetric and below the predicted covariance"""
        for alpha in (1.0, 0.5, 0.1):
            cfg = KovaConfig(learning_rate=alpha, noise=NoiseModel(eta=0.05))
            state = init_state(small_mlp.param_dim, mlp_params, cfg)
            for _ in range(30):
                batch = Batch(inputs=rng.normal(size=(4, 2)), targets=rng.normal(size=4))
                state, diagnostics = kova_step(state, batch, small_mlp, cfg)
                assert np.max(np.abs(state.cov - state.cov.T)) <= 1e-10
                assert loewner_decrease_check(diagnostics.pred_cov, state.cov)
                assert np.linalg.eigvalsh(state.cov)[0] >= -1e-8
