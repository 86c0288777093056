"""
Loss Functions and Information-Geometry Diagnostics

- mle_loss: mean squared TD error, (1/2N)·Σ(y_i − h(u_i; θ))²
- ekf_loss: the regularized objective minimized by one KOVA step,
  ½δᵀP_n^{-1}δ + ½(θ − θ_prev)ᵀP_pred^{-1}(θ − θ_prev)
- empirical_fisher / kl_quadratic: second-order approximation of the KL
  divergence between Gaussian predictive models around θ
- sgd_mle_step: the plain gradient-descent baseline on mle_loss

Covariance inverses are applied through Cholesky solves.
"""

from typing import Optional

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from utilities.errors import DivergenceError, SingularCovarianceError
from utilities.targets import Batch
from utilities.valuefunc import ValueModel, as_param_vector, forward, jacobian


class FisherMatrix:
    """Symmetric positive semi-definite d × d empirical Fisher information matrix"""

    def __init__(self, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValueError(f"Fisher matrix must be square, got shape {values.shape}")
        self.values = 0.5 * (values + values.T)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def min_eigenvalue(self) -> float:
        if self.dim == 0:
            return 0.0
        return float(np.linalg.eigvalsh(self.values)[0])

    def __repr__(self) -> str:
        return f"FisherMatrix(d={self.dim}, trace={np.trace(self.values):.6g})"


def _residuals(batch: Batch, model: ValueModel, theta) -> np.ndarray:
    if batch.size == 0:
        raise ValueError("loss of an empty batch is undefined")
    return batch.targets - forward(model, theta, batch.inputs)


def mle_loss(batch: Batch, model: ValueModel, theta) -> float:
    """Mean squared TD error (1/2N)·Σδ_i²"""
    delta = _residuals(batch, model, theta)
    return float(delta @ delta / (2.0 * batch.size))


def _spd_solve(matrix: np.ndarray, rhs: np.ndarray, name: str) -> np.ndarray:
    try:
        factor = cho_factor(matrix, lower=True)
    except LinAlgError as exc:
        raise SingularCovarianceError(f"{name} is singular or not positive definite") from exc
    return cho_solve(factor, rhs)


def ekf_loss(batch: Batch, model: ValueModel, theta, theta_prev,
             pred_cov: Optional[np.ndarray], obs_noise: np.ndarray) -> float:
    """
    Regularized objective minimized by a KOVA step.

    Args:
        batch: Inputs and target labels
        model: Value approximator
        theta: Point at which to evaluate
        theta_prev: Predicted estimate θ̂_{t|t-1} (regularizer center)
        pred_cov: Predicted covariance P_{t|t-1}; None omits the regularizer,
            which is the zero prior/evolution covariance limit
        obs_noise: N × N observation-noise covariance

    Raises:
        SingularCovarianceError: a covariance is singular
        ValueError: shapes mismatch
    """
    theta = as_param_vector(model, theta)
    delta = _residuals(batch, model, theta)
    obs_noise = np.asarray(obs_noise, dtype=np.float64)
    if obs_noise.shape != (batch.size, batch.size):
        raise ValueError(f"P_n must be {batch.size}x{batch.size}, got {obs_noise.shape}")

    data_term = 0.5 * float(delta @ _spd_solve(obs_noise, delta, "observation-noise covariance"))
    if pred_cov is None:
        return data_term

    diff = theta - as_param_vector(model, theta_prev)
    pred_cov = np.asarray(pred_cov, dtype=np.float64)
    if pred_cov.shape != (model.param_dim, model.param_dim):
        raise ValueError(f"P_pred must be {model.param_dim}x{model.param_dim}, got {pred_cov.shape}")
    prior_term = 0.5 * float(diff @ _spd_solve(pred_cov, diff, "predicted covariance"))
    return data_term + prior_term


def empirical_fisher(model: ValueModel, theta, inputs, sigma: float) -> FisherMatrix:
    """
    Gaussian closed form of the empirical Fisher matrix,
    F̂ = (1/N)·Σ ∇h(u_i)∇h(u_i)ᵀ / σ.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    J = jacobian(model, theta, inputs)
    n = J.shape[1]
    if n == 0:
        return FisherMatrix(np.zeros((model.param_dim, model.param_dim)))
    return FisherMatrix(J @ J.T / (n * sigma))


def kl_quadratic(delta_theta, fisher: FisherMatrix) -> float:
    """½·ΔθᵀF̂Δθ"""
    delta_theta = np.asarray(delta_theta, dtype=np.float64)
    if delta_theta.shape != (fisher.dim,):
        raise ValueError(f"step must have length {fisher.dim}, got shape {delta_theta.shape}")
    return 0.5 * float(delta_theta @ fisher.values @ delta_theta)


def gaussian_predictive_kl(model: ValueModel, theta, delta_theta, inputs, sigma: float) -> float:
    """
    Exact KL between the Gaussian predictive models at θ + Δθ and θ with
    variance σ, averaged over the N inputs.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    theta = as_param_vector(model, theta)
    shifted = forward(model, theta + np.asarray(delta_theta, dtype=np.float64), inputs)
    base = forward(model, theta, inputs)
    if base.shape[0] == 0:
        return 0.0
    return float(np.sum((shifted - base) ** 2) / (2.0 * sigma * base.shape[0]))


def kova_precision_increment(model: ValueModel, theta, inputs, obs_noise: np.ndarray) -> np.ndarray:
    """Information J·P_n^{-1}·Jᵀ added to P^{-1} by one zero-evolution KOVA step"""
    J = jacobian(model, theta, inputs)
    return J @ _spd_solve(np.asarray(obs_noise, dtype=np.float64), J.T, "observation-noise covariance")


def mle_gradient(batch: Batch, model: ValueModel, theta) -> np.ndarray:
    """Gradient of mle_loss: −(1/N)·Σδ_i∇h(u_i)"""
    delta = _residuals(batch, model, theta)
    return -(jacobian(model, theta, batch.inputs) @ delta) / batch.size


def sgd_mle_step(theta, batch: Batch, model: ValueModel, alpha: float) -> np.ndarray:
    """
    One gradient-descent step on mle_loss, θ ← θ + α·(1/N)·Σδ_i∇h(u_i).

    Raises:
        DivergenceError: the step produced non-finite parameters
    """
    if alpha <= 0:
        raise ValueError(f"learning rate must be positive, got {alpha}")
    theta = as_param_vector(model, theta)
    new_theta = theta - alpha * mle_gradient(batch, model, theta)
    if not np.all(np.isfinite(new_theta)):
        raise DivergenceError("SGD step produced non-finite parameters")
    return new_theta
