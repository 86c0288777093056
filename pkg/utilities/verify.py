"""
Verification Oracles

Brute-force re-derivations of the filter algebra, used by the test suite and
by the ``verify`` CLI subcommand. Each oracle computes its reference value on
an independent code path (explicit inverses, finite differences, Monte-Carlo
draws, normal equations) and compares it against the library routine.

Every check returns an OracleReport; ``passed`` holds exactly when
max_abs_error <= tolerance.
"""

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy.linalg import LinAlgError, eigvalsh

from utilities import envs
from utilities.kova import (KovaConfig, NoiseModel, OptimizerState, MAX_RATIO_NOISE,
                            kalman_gain, kova_step)
from utilities.objectives import (ekf_loss, empirical_fisher, kl_quadratic, mle_loss)
from utilities.targets import Batch, SampleGenerator, TargetSpec, sample_batch
from utilities.valuefunc import (LINEAR, ValueModel, as_param_vector, forward, init_params,
                                 jacobian)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OracleReport:
    name: str
    max_abs_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_abs_error <= self.tolerance)

    def format_line(self) -> str:
        status = 'PASS' if self.passed else 'FAIL'
        return f"{status}  {self.name:<32} max_abs_error={self.max_abs_error:.3e}  tolerance={self.tolerance:.1e}"

    def to_dict(self) -> dict:
        return {
            'name': self.name,
            'max_abs_error': self.max_abs_error,
            'tolerance': self.tolerance,
            'passed': self.passed,
        }


def _inv(matrix: np.ndarray, name: str) -> np.ndarray:
    try:
        result = np.linalg.inv(matrix)
    except LinAlgError as exc:
        raise ValueError(f"{name} is singular") from exc
    if not np.all(np.isfinite(result)):
        raise ValueError(f"{name} is singular")
    return result


def random_spd(rng: np.random.Generator, d: int, scale: float = 1.0) -> np.ndarray:
    """Well-conditioned random symmetric positive-definite matrix"""
    A = rng.normal(size=(d, d))
    return scale * (A @ A.T / d + np.eye(d))


# --- Jacobian -----------------------------------------------------------------

def finite_diff_jacobian(model: ValueModel, theta, inputs, step: float = 1e-5) -> np.ndarray:
    """Central-difference d × N Jacobian of the stacked model outputs"""
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    theta = as_param_vector(model, theta)
    columns = []
    for j in range(model.param_dim):
        bump = np.zeros(model.param_dim)
        bump[j] = step
        columns.append((forward(model, theta + bump, inputs) - forward(model, theta - bump, inputs))
                       / (2.0 * step))
    return np.array(columns)


def check_jacobian(model: ValueModel, theta, inputs, step: float = 1e-5,
                   tolerance: float = 1e-4, floor: float = 1e-5) -> OracleReport:
    """
    Largest entrywise relative error between analytic and central-difference
    Jacobians. Entries smaller than ``floor`` in magnitude are measured
    against the floor instead.
    """
    analytic = jacobian(model, theta, inputs)
    numeric = finite_diff_jacobian(model, theta, inputs, step)
    if numeric.size == 0:
        return OracleReport('jacobian_finite_difference', 0.0, tolerance)
    error = float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))
    return OracleReport('jacobian_finite_difference', error, tolerance)


# --- Regularized least-squares minimizers --------------------------------------

def _regularized_normal_equations(design: np.ndarray, targets: np.ndarray, theta_prev: np.ndarray,
                                  pred_cov: np.ndarray, obs_noise: np.ndarray) -> np.ndarray:
    Pn_inv = _inv(obs_noise, "observation-noise covariance")
    P_inv = _inv(pred_cov, "predicted covariance")
    lhs = design.T @ Pn_inv @ design + P_inv
    rhs = design.T @ Pn_inv @ targets + P_inv @ theta_prev
    return np.linalg.solve(lhs, rhs)


def _feature_matrix(model: ValueModel, inputs) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    return np.array([np.asarray(model.feature_map(u), dtype=np.float64) for u in rows])


def linearized_argmin_ekf(batch: Batch, model: ValueModel, theta_prev,
                          pred_cov: np.ndarray, obs_noise: np.ndarray) -> np.ndarray:
    """
    Minimizer of the regularized objective with h replaced by its first-order
    expansion h(θ_prev) + Jᵀ(θ − θ_prev), computed from the normal equations.
    """
    theta_prev = as_param_vector(model, theta_prev)
    if model.kind == LINEAR:
        J = _feature_matrix(model, batch.inputs).T
    else:
        J = jacobian(model, theta_prev, batch.inputs)
    shifted = batch.targets - forward(model, theta_prev, batch.inputs) + J.T @ theta_prev
    return _regularized_normal_equations(J.T, shifted, theta_prev, pred_cov, obs_noise)


def brute_force_argmin_ekf(batch: Batch, model: ValueModel, theta_prev, pred_cov: np.ndarray,
                           obs_noise: np.ndarray, iterations: int = 10_000,
                           gradient_tolerance: float = 1e-6) -> Tuple[np.ndarray, OracleReport]:
    """
    Reference minimizer of the regularized objective.

    Linear models: exact normal-equations solve on an independently built
    feature matrix. Nonlinear models: gradient descent with backtracking from
    θ_prev, keeping the lowest-loss iterate.

    Returns:
        (θ, report); the report's error is the gradient norm at the returned
        point, so a non-converged descent shows up as a failed report
    """
    theta_prev = as_param_vector(model, theta_prev)
    if model.param_dim > 32:
        raise ValueError(f"brute-force oracle is limited to d <= 32, got {model.param_dim}")
    Pn_inv = _inv(np.asarray(obs_noise, dtype=np.float64), "observation-noise covariance")
    P_inv = _inv(np.asarray(pred_cov, dtype=np.float64), "predicted covariance")

    if model.kind == LINEAR:
        phi = _feature_matrix(model, batch.inputs)
        theta = _regularized_normal_equations(phi, batch.targets, theta_prev, pred_cov, obs_noise)
        residual = batch.targets - phi @ theta
        grad = -phi.T @ Pn_inv @ residual + P_inv @ (theta - theta_prev)
        return theta, OracleReport('ekf_argmin_normal_equations', float(np.linalg.norm(grad)),
                                   gradient_tolerance)

    def loss_and_grad(theta):
        delta = batch.targets - forward(model, theta, batch.inputs)
        diff = theta - theta_prev
        loss = 0.5 * delta @ Pn_inv @ delta + 0.5 * diff @ P_inv @ diff
        grad = -jacobian(model, theta, batch.inputs) @ (Pn_inv @ delta) + P_inv @ diff
        return float(loss), grad

    theta = theta_prev.copy()
    loss, grad = loss_and_grad(theta)
    best_theta, best_loss, best_grad = theta, loss, grad
    step = 1.0
    for _ in range(iterations):
        grad_sq = float(grad @ grad)
        if np.sqrt(grad_sq) < gradient_tolerance * 1e-3:
            break
        while step > 1e-16:
            candidate = theta - step * grad
            cand_loss, cand_grad = loss_and_grad(candidate)
            if cand_loss <= loss - 1e-4 * step * grad_sq:
                break
            step *= 0.5
        else:
            break
        theta, loss, grad = candidate, cand_loss, cand_grad
        if loss < best_loss:
            best_theta, best_loss, best_grad = theta, loss, grad
        step *= 2.0

    grad_norm = float(np.linalg.norm(best_grad))
    if grad_norm > gradient_tolerance:
        logger.warning("Gradient descent oracle did not converge (gradient norm %.3e)", grad_norm)
    return best_theta, OracleReport('ekf_argmin_gradient_descent', grad_norm, gradient_tolerance)


# --- Matrix identities ------------------------------------------------------------

def check_matrix_inversion_lemma(B: np.ndarray, C: np.ndarray, D: np.ndarray,
                                 tolerance: float = 1e-8) -> OracleReport:
    """(B^{-1} + C D^{-1} Cᵀ)^{-1} = B − BC(D + CᵀBC)^{-1}CᵀB, elementwise"""
    B, C, D = (np.atleast_2d(np.asarray(m, dtype=np.float64)) for m in (B, C, D))
    lhs = _inv(_inv(B, "B") + C @ _inv(D, "D") @ C.T, "B^-1 + C D^-1 C^T")
    rhs = B - B @ C @ _inv(D + C.T @ B @ C, "D + C^T B C") @ C.T @ B
    return OracleReport('matrix_inversion_lemma', float(np.max(np.abs(lhs - rhs))), tolerance)


def check_gain_duality(pred_cov: np.ndarray, J: np.ndarray, obs_noise: np.ndarray,
                       tolerance: float = 1e-8) -> OracleReport:
    """kalman_gain against the d × d information form (P^{-1} + J P_n^{-1} Jᵀ)^{-1} J P_n^{-1}"""
    Pn_inv = _inv(obs_noise, "observation-noise covariance")
    reference = _inv(_inv(pred_cov, "predicted covariance") + J @ Pn_inv @ J.T,
                     "information matrix") @ J @ Pn_inv
    gain = kalman_gain(pred_cov, J, obs_noise)
    return OracleReport('gain_duality', float(np.max(np.abs(gain - reference))), tolerance)


# --- Innovation statistics --------------------------------------------------------

def check_innovation_stats(model: ValueModel, theta_hat, inputs, pred_cov: np.ndarray,
                           obs_noise: np.ndarray, n_draws: int = 100_000, seed: int = 0,
                           tolerance: float = 0.05) -> OracleReport:
    """
    Monte-Carlo check of the filter's innovation statistics.

    Draws θ ~ N(θ̂, P_pred) and n ~ N(0, P_n), pushes θ through the
    linearized model and compares the empirical mean of y, the empirical
    cross-covariance of (θ, y) and the empirical covariance of y against ŷ,
    P_pred·J and JᵀP_pred·J + P_n. Errors are scaled by the standard
    deviations involved, so the tolerance is a relative agreement level.
    """
    theta_hat = as_param_vector(model, theta_hat)
    pred_cov = np.asarray(pred_cov, dtype=np.float64)
    obs_noise = np.asarray(obs_noise, dtype=np.float64)
    rng = np.random.default_rng(seed)

    y_hat = forward(model, theta_hat, inputs)
    J_numeric = finite_diff_jacobian(model, theta_hat, inputs)
    J = jacobian(model, theta_hat, inputs)
    n = y_hat.shape[0]

    thetas = rng.multivariate_normal(theta_hat, pred_cov, size=n_draws, method='eigh')
    noise = rng.multivariate_normal(np.zeros(n), obs_noise, size=n_draws, method='eigh')
    observations = y_hat + (thetas - theta_hat) @ J_numeric + noise

    innovation_cov = J.T @ pred_cov @ J + obs_noise
    cross_cov = pred_cov @ J

    centered_theta = thetas - thetas.mean(axis=0)
    centered_obs = observations - observations.mean(axis=0)
    empirical_cross = centered_theta.T @ centered_obs / (n_draws - 1)
    empirical_innovation = centered_obs.T @ centered_obs / (n_draws - 1)

    def scaled(error: np.ndarray, reference_scale: float) -> float:
        return float(np.max(np.abs(error))) / max(reference_scale, 1e-12)

    obs_var = float(np.max(np.diag(innovation_cov)))
    param_var = float(np.max(np.diag(pred_cov))) if pred_cov.size else 0.0
    errors = [
        scaled(observations.mean(axis=0) - y_hat, max(np.sqrt(obs_var), float(np.max(np.abs(y_hat))))),
        scaled(empirical_innovation - innovation_cov, obs_var),
        scaled(empirical_cross - cross_cov, np.sqrt(param_var * obs_var)) if param_var > 0 else 0.0,
    ]
    return OracleReport('innovation_statistics', max(errors), tolerance)


# --- KL approximation order ---------------------------------------------------------

def check_kl_order(model: ValueModel, theta, inputs, sigma: float = 1.0, seed: int = 0,
                   start_norm: float = 1e-2, halvings: int = 4,
                   min_ratio: float = 6.0) -> OracleReport:
    """
    The gap between the exact Gaussian predictive KL and ½ΔθᵀF̂Δθ must shrink
    at least min_ratio-fold per halving of Δθ (third-order remainder).

    The step direction is the one, among 8 random unit directions, with the
    largest gap at start_norm. The reported error is 1/(smallest ratio), so
    the check passes when every ratio reaches min_ratio.
    """
    theta = as_param_vector(model, theta)
    base = forward(model, theta, inputs)
    n = base.shape[0]
    fisher = empirical_fisher(model, theta, inputs, sigma)
    rng = np.random.default_rng(seed)

    def gap(delta):
        exact = float(np.sum((forward(model, theta + delta, inputs) - base) ** 2) / (2.0 * sigma * n))
        return abs(exact - kl_quadratic(delta, fisher))

    directions = rng.normal(size=(8, model.param_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    direction = max(directions, key=lambda u: gap(start_norm * u))

    gaps = [gap(start_norm * direction / 2 ** i) for i in range(halvings + 1)]
    ratios = [gaps[i] / gaps[i + 1] if gaps[i + 1] > 0 else np.inf for i in range(halvings)]
    logger.debug("KL gap ratios per halving: %s", ratios)
    return OracleReport('kl_quadratic_gap_order', 1.0 / min(ratios), 1.0 / min_ratio)


# --- Covariance contract -----------------------------------------------------------

def check_covariance_contract(n_updates: int = 1000, seed: int = 0,
                              batch_size: int = 8) -> List[OracleReport]:
    """
    Run consecutive zero-evolution KOVA updates on a random MDP and check that
    every covariance is symmetric and never increases in the Loewner order.
    """
    mdp = envs.random_mdp(seed, 4, 2, gamma=0.9)
    policy = envs.random_policy(seed + 1, 4, 2)
    model = ValueModel.tabular(mdp.n_states)
    spec = TargetSpec(type='kstep', k=1, gamma=mdp.gamma)
    generator = SampleGenerator(capacity=1, seed=seed)
    generator.add_trajectory(envs.rollout(mdp, policy, start=0, length=200, seed=seed))

    cfg = KovaConfig(noise=NoiseModel.zero_evolution())
    state = OptimizerState(theta_hat=np.zeros(model.param_dim), cov=np.eye(model.param_dim))
    asymmetry, increase = 0.0, -np.inf
    for _ in range(n_updates):
        batch = sample_batch(generator, batch_size, spec, state.theta_hat, model)
        state, diagnostics = kova_step(state, batch, model, cfg)
        asymmetry = max(asymmetry, float(np.max(np.abs(state.cov - state.cov.T))))
        increase = max(increase, float(eigvalsh(state.cov - diagnostics.pred_cov)[-1]))

    return [
        OracleReport('covariance_symmetry', asymmetry, 1e-10),
        OracleReport('covariance_loewner_decrease', max(increase, 0.0), 1e-8),
    ]


# --- Default suite ----------------------------------------------------------------

def _random_linear_instance(rng: np.random.Generator, d: int, n: int):
    model = ValueModel.tabular(d)
    batch = Batch(inputs=rng.normal(size=(n, d)), targets=rng.normal(size=n),
                  ratios=rng.uniform(0.2, 1.0, size=n))
    return model, batch


def kova_step_against_oracle(model: ValueModel, batch: Batch, theta_prev: np.ndarray,
                             pred_cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    One α = 1, zero-evolution KOVA step from (θ_prev, P_pred) with max-ratio
    noise, plus the observation-noise matrix rebuilt independently for an oracle.
    """
    noise = NoiseModel(evolution='zero', eta=0.0, observation=MAX_RATIO_NOISE)
    cfg = KovaConfig(learning_rate=1.0, noise=noise)
    state = OptimizerState(theta_hat=theta_prev, cov=pred_cov)
    updated, _ = kova_step(state, batch, model, cfg)
    obs_noise = np.diag(batch.size * np.maximum(1.0, 1.0 / (batch.ratio_vector() + noise.epsilon)))
    return updated.theta_hat, obs_noise


def run_default_suite(fast: bool = False, seed: int = 0) -> List[OracleReport]:
    """
    Every oracle check, on seeded random instances.

    ``fast`` reduces Monte-Carlo draws and repetition counts.
    """
    rng = np.random.default_rng(seed)
    reports: List[OracleReport] = []
    repeats = 10 if fast else 50

    # regularized-objective minimizer, linear models
    worst = 0.0
    for _ in range(repeats):
        d, n = int(rng.integers(4, 17)), int(rng.integers(4, 33))
        model, batch = _random_linear_instance(rng, d, n)
        theta_prev = rng.normal(size=d)
        pred_cov = random_spd(rng, d)
        theta_kova, obs_noise = kova_step_against_oracle(model, batch, theta_prev, pred_cov)
        theta_ref, _ = brute_force_argmin_ekf(batch, model, theta_prev, pred_cov, obs_noise)
        worst = max(worst, float(np.max(np.abs(theta_kova - theta_ref))))
    reports.append(OracleReport('kova_update_equals_ekf_argmin', worst, 1e-8))

    # same, nonlinear models against the linearized objective
    worst = 0.0
    mlp = ValueModel.mlp(3, [4])
    for _ in range(max(repeats // 5, 2)):
        n = int(rng.integers(4, 9))
        batch = Batch(inputs=rng.normal(size=(n, 3)), targets=rng.normal(size=n),
                      ratios=rng.uniform(0.2, 1.0, size=n))
        theta_prev = rng.normal(scale=0.5, size=mlp.param_dim)
        pred_cov = random_spd(rng, mlp.param_dim, scale=0.1)
        theta_kova, obs_noise = kova_step_against_oracle(mlp, batch, theta_prev, pred_cov)
        theta_ref = linearized_argmin_ekf(batch, mlp, theta_prev, pred_cov, obs_noise)
        worst = max(worst, float(np.max(np.abs(theta_kova - theta_ref))))
    reports.append(OracleReport('kova_update_equals_linearized_argmin', worst, 1e-8))

    # squared-error objective equals the unregularized EKF objective at σ_i = N
    worst = 0.0
    for _ in range(repeats * 2):
        d, n = int(rng.integers(1, 9)), int(rng.integers(1, 33))
        model, batch = _random_linear_instance(rng, d, n)
        theta = rng.normal(size=d)
        gap = ekf_loss(batch, model, theta, theta, None, n * np.eye(n)) - mle_loss(batch, model, theta)
        worst = max(worst, abs(gap))
    reports.append(OracleReport('mle_equals_unregularized_ekf', worst, 1e-10))

    inversion, duality = [], []
    for _ in range(repeats):
        d, n = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        B, D = random_spd(rng, d), random_spd(rng, n)
        C = rng.normal(size=(d, n))
        inversion.append(check_matrix_inversion_lemma(B, C, D).max_abs_error)
        duality.append(check_gain_duality(B, C, D).max_abs_error)
    reports.append(OracleReport('matrix_inversion_lemma', max(inversion), 1e-8))
    reports.append(OracleReport('gain_duality', max(duality), 1e-8))

    deep = ValueModel.mlp(4, [16, 16])
    theta = init_params(deep, seed, 0.5)
    reports.append(check_jacobian(deep, theta, rng.normal(size=(20 if fast else 100, 4))))

    small = ValueModel.mlp(2, [3])
    theta = init_params(small, 0, 0.8)
    inputs = rng.normal(size=(3, 2))
    reports.append(check_innovation_stats(
        small, theta, inputs, random_spd(rng, small.param_dim, scale=0.5), random_spd(rng, 3, scale=0.1),
        n_draws=50_000 if fast else 100_000, seed=seed,
    ))

    reports.append(check_kl_order(ValueModel.mlp(2, [4]), init_params(ValueModel.mlp(2, [4]), 0, 1.0),
                                  rng.normal(size=(5, 2)), seed=seed))

    reports.extend(check_covariance_contract(n_updates=200 if fast else 1000, seed=seed))

    mdp = envs.random_mdp(seed, 5, 3, gamma=0.9)
    policy = envs.random_policy(seed, 5, 3)
    values = envs.exact_value(mdp, policy)
    residual = values - envs.expected_kstep_values(mdp, policy, values, 1)
    reports.append(OracleReport('bellman_residual', float(np.max(np.abs(residual))), 1e-10))

    for report in reports:
        logger.debug(report.format_line())
    return reports
