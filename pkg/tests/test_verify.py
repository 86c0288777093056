"""
Tests for verify.py - brute-force oracles and the default verification suite
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from utilities.targets import Batch
from utilities.valuefunc import ValueModel, init_params
from utilities.verify import (
    OracleReport,
    brute_force_argmin_ekf,
    check_covariance_contract,
    check_gain_duality,
    check_innovation_stats,
    check_jacobian,
    check_matrix_inversion_lemma,
    finite_diff_jacobian,
    kova_step_against_oracle,
    linearized_argmin_ekf,
    random_spd,
    run_default_suite,
)


class TestOracleReport:
    """Tests for OracleReport"""

    def test_passed_iff_within_tolerance(self):
        assert OracleReport('a', 1e-9, 1e-8).passed
        assert OracleReport('b', 1e-8, 1e-8).passed
        assert not OracleReport('c', 2e-8, 1e-8).passed

    def test_format_line(self):
        line = OracleReport('gain_duality', 1e-12, 1e-8).format_line()
        assert line.startswith('PASS')
        assert 'gain_duality' in line


class TestBruteForceArgmin:
    """Tests for brute_force_argmin_ekf"""

    def test_zero_residual_returns_prior_mean(self):
        """Targets already fitted at θ_prev leave it as the minimizer"""
        model = ValueModel.tabular(3)
        theta_prev = np.array([1.0, -1.0, 2.0])
        inputs = np.random.default_rng(0).normal(size=(5, 3))
        batch = Batch(inputs=inputs, targets=inputs @ theta_prev)
        theta, report = brute_force_argmin_ekf(batch, model, theta_prev, np.eye(3), np.eye(5))
        np.testing.assert_allclose(theta, theta_prev, atol=1e-12)
        assert report.passed

    def test_scalar_closed_form(self):
        """d=1: θ = (u·y/σ + θ_prev/p)/(u²/σ + 1/p)"""
        model = ValueModel.tabular(1)
        batch = Batch(inputs=[[2.0]], targets=[3.0])
        theta, _ = brute_force_argmin_ekf(batch, model, [0.5], np.array([[4.0]]), np.array([[2.0]]))
        expected = (2.0 * 3.0 / 2.0 + 0.5 / 4.0) / (4.0 / 2.0 + 1.0 / 4.0)
        assert theta[0] == pytest.approx(expected)

    def test_matches_kova_update(self, rng):
        """d=4, N=8 random linear instance agrees with the α=1 update"""
        model = ValueModel.tabular(4)
        batch = Batch(inputs=rng.normal(size=(8, 4)), targets=rng.normal(size=8),
                      ratios=rng.uniform(0.2, 1.0, size=8))
        theta_prev = rng.normal(size=4)
        P = random_spd(rng, 4)
        theta_kova, P_n = kova_step_against_oracle(model, batch, theta_prev, P)
        theta_ref, _ = brute_force_argmin_ekf(batch, model, theta_prev, P, P_n)
        assert np.max(np.abs(theta_kova - theta_ref)) < 1e-8

    def test_gradient_descent_on_mlp(self, small_mlp, mlp_params, rng):
        """Descent on a nonlinear model converges near the linearized minimizer for small steps"""
        batch = Batch(inputs=rng.normal(size=(4, 2)), targets=rng.normal(scale=0.01, size=4))
        P = 0.01 * np.eye(small_mlp.param_dim)
        P_n = 4.0 * np.eye(4)
        theta, report = brute_force_argmin_ekf(batch, small_mlp, mlp_params, P, P_n)
        assert report.name == 'ekf_argmin_gradient_descent'
        assert report.passed
        linearized = linearized_argmin_ekf(batch, small_mlp, mlp_params, P, P_n)
        assert np.max(np.abs(theta - linearized)) < 1e-3

    def test_dimension_limit(self):
        model = ValueModel.tabular(40)
        batch = Batch(inputs=np.zeros((1, 40)), targets=[0.0])
        with pytest.raises(ValueError):
            brute_force_argmin_ekf(batch, model, np.zeros(40), np.eye(40), np.eye(1))


class TestMatrixIdentities:
    """Tests for check_matrix_inversion_lemma and check_gain_duality"""

    def test_identity_case(self):
        """B=D=I, C=0 gives identity on both sides"""
        assert check_matrix_inversion_lemma(np.eye(3), np.zeros((3, 2)), np.eye(2)).max_abs_error == 0.0

    def test_scalar_case(self):
        """B=2, C=1, D=1 gives 2/3 on both sides"""
        report = check_matrix_inversion_lemma([[2.0]], [[1.0]], [[1.0]])
        assert report.passed

    def test_random_instances(self, rng):
        for _ in range(50):
            d, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            report = check_matrix_inversion_lemma(random_spd(rng, d), rng.normal(size=(d, n)), random_spd(rng, n))
            assert report.passed

    def test_singular_input(self):
        with pytest.raises(ValueError):
            check_matrix_inversion_lemma(np.zeros((2, 2)), np.ones((2, 1)), np.eye(1))

    def test_gain_duality(self, rng):
        for _ in range(50):
            d, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
            assert check_gain_duality(random_spd(rng, d), rng.normal(size=(d, n)), random_spd(rng, n)).passed


class TestJacobianOracle:
    """Tests for finite_diff_jacobian and check_jacobian"""

    def test_linear_equals_features(self):
        model = ValueModel.tabular(3)
        inputs = np.array([[1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]])
        np.testing.assert_allclose(finite_diff_jacobian(model, np.zeros(3), inputs), inputs.T, atol=1e-10)

    def test_dead_parameters(self):
        """With zero output weights the hidden-layer columns vanish"""
        model = ValueModel.mlp(2, [3])
        theta = np.zeros(model.param_dim)
        theta[:6] = 0.5  # hidden weights only
        J = finite_diff_jacobian(model, theta, np.ones((2, 2)))
        np.testing.assert_allclose(J[:9], 0.0, atol=1e-10)

    def test_step_must_be_positive(self, small_mlp, mlp_params):
        with pytest.raises(ValueError):
            finite_diff_jacobian(small_mlp, mlp_params, np.ones((1, 2)), step=0.0)

    def test_check_jacobian(self, deep_mlp):
        theta = init_params(deep_mlp, 0, 0.5)
        assert check_jacobian(deep_mlp, theta, np.random.default_rng(2).normal(size=(20, 4))).passed

    def test_small_entry_error_fails(self, small_mlp, mlp_params, monkeypatch):
        """A 1% error in the smallest nonzero entry fails"""
        inputs = np.array([[0.3, -0.2]])
        numeric = finite_diff_jacobian(small_mlp, mlp_params, inputs)
        magnitudes = np.where(np.abs(numeric) > 1e-3, np.abs(numeric), np.inf)
        smallest = np.unravel_index(np.argmin(magnitudes), numeric.shape)
        broken = numeric.copy()
        broken[smallest] *= 1.01
        monkeypatch.setattr('utilities.verify.jacobian', lambda model, theta, u: broken)
        assert not check_jacobian(small_mlp, mlp_params, inputs).passed

    def test_zero_columns_measured_against_floor(self):
        """Exactly-zero entries from dead units pass"""
        model = ValueModel.mlp(2, [3])
        theta = init_params(model, 1, 0.5)
        theta[9:12] = 0.0
        report = check_jacobian(model, theta, np.random.default_rng(0).normal(size=(5, 2)))
        assert report.passed


class TestInnovationStats:
    """Tests for check_innovation_stats"""

    def test_zero_prior_covariance(self, small_mlp, mlp_params):
        """Without parameter uncertainty the innovation covariance is P_n"""
        report = check_innovation_stats(small_mlp, mlp_params, np.ones((2, 2)),
                                        np.zeros((small_mlp.param_dim,) * 2), np.eye(2), n_draws=50_000)
        assert report.passed

    def test_linear_model(self, rng):
        model = ValueModel.tabular(3)
        report = check_innovation_stats(model, np.zeros(3), rng.normal(size=(3, 3)),
                                        random_spd(rng, 3), random_spd(rng, 3, scale=0.5))
        assert report.passed

    def test_small_mlp(self, rng):
        model = ValueModel.mlp(2, [3])
        theta = init_params(model, 0, 0.8)
        report = check_innovation_stats(model, theta, rng.normal(size=(3, 2)),
                                        random_spd(rng, model.param_dim, scale=0.5),
                                        random_spd(rng, 3, scale=0.1))
        assert report.passed


class TestCovarianceContract:
    """Tests for check_covariance_contract"""

    def test_consecutive_updates(self):
        reports = check_covariance_contract(n_updates=1000, seed=0)
        assert [r.name for r in reports] == ['covariance_symmetry', 'covariance_loewner_decrease']
        assert all(r.passed for r in reports)


class TestDefaultSuite:
    """Tests for run_default_suite"""

    def test_fast_suite_passes(self):
        reports = run_default_suite(fast=True)
        failed = [r.format_line() for r in reports if not r.passed]
        assert not failed
        assert len({r.name for r in reports}) == len(reports)
