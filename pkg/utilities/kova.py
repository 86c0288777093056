"""
KOVA Optimizer

Kalman-filter optimization of value-function parameters. The parameters are
treated as a random walk θ_t = θ_{t-1} + v_t observed through the value model,
y(u_t) = h(u_t; θ_t) + n_t. Each step runs one filter iteration:

    predict      P_{t|t-1} = P_{t-1|t-1} + P_v
    linearize    ŷ = h(u; θ̂_{t|t-1}),  J = ∇_θ h(u; θ̂_{t|t-1})     (d × N)
    innovation   P_ỹ = Jᵀ P_{t|t-1} J + P_n                          (N × N)
    gain         K = P_{t|t-1} J P_ỹ^{-1}                             (d × N)
    update       θ̂_{t|t} = θ̂_{t|t-1} + α K (y − ŷ)
                 P_{t|t} = P_{t|t-1} − α K P_ỹ Kᵀ

Only the N × N innovation matrix is factorized; P is never inverted. With
α = 1 the parameter update is the exact minimizer of the regularized objective
½δᵀP_n^{-1}δ + ½(θ−θ̂_{t|t-1})ᵀP_{t|t-1}^{-1}(θ−θ̂_{t|t-1}) for linear models
(and of its linearization for nonlinear ones).

Noise policies:
- evolution: 'zero' (P_v = 0) or 'fading' (P_v = η/(1−η)·P_{t-1|t-1})
- observation: 'batch-size' (σ_i = N) or 'max-ratio'
  (σ_i = N·max(1, 1/(ratio_i + ε)))
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, eigvalsh

from utilities.errors import DivergenceError, GainComputationError
from utilities.targets import Batch
from utilities.valuefunc import ValueModel, as_param_vector, forward, jacobian

logger = logging.getLogger(__name__)


ZERO_EVOLUTION = 'zero'
FADING_MEMORY = 'fading'
BATCH_SIZE_NOISE = 'batch-size'
MAX_RATIO_NOISE = 'max-ratio'

PSD_TOLERANCE = 1e-8


@dataclass(frozen=True)
class NoiseModel:
    """Evolution-noise and observation-noise policies"""

    evolution: str = FADING_MEMORY
    eta: float = 0.01
    observation: str = BATCH_SIZE_NOISE
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.evolution not in (ZERO_EVOLUTION, FADING_MEMORY):
            raise ValueError(f"Unknown evolution noise {self.evolution!r}")
        if self.observation not in (BATCH_SIZE_NOISE, MAX_RATIO_NOISE):
            raise ValueError(f"Unknown observation noise {self.observation!r}")
        if not 0.0 <= self.eta < 1.0:
            raise ValueError(f"eta must be in [0, 1), got {self.eta}")
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")

    @classmethod
    def zero_evolution(cls, observation: str = BATCH_SIZE_NOISE,
                       epsilon: float = 1e-8) -> 'NoiseModel':
        return cls(evolution=ZERO_EVOLUTION, eta=0.0, observation=observation, epsilon=epsilon)


@dataclass(frozen=True)
class KovaConfig:
    """
    Optimizer hyper-parameters.

    Attributes:
        learning_rate: α in (0, 1], applied to both the parameter and covariance update
        initial_cov_scale: p₀ >= 0, P_{0|0} = p₀·I
        noise: Evolution/observation noise policies
        jitter: Diagonal load used on a failed factorization; None picks
            1e-9·trace(P_ỹ)/N
    """

    learning_rate: float = 1.0
    initial_cov_scale: float = 1.0
    noise: NoiseModel = field(default_factory=NoiseModel)
    jitter: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.initial_cov_scale < 0:
            raise ValueError(f"initial_cov_scale must be >= 0, got {self.initial_cov_scale}")
        if self.jitter is not None and self.jitter < 0:
            raise ValueError(f"jitter must be >= 0, got {self.jitter}")


@dataclass(frozen=True)
class OptimizerState:
    """Parameter estimate θ̂_{t|t}, error covariance P_{t|t} and step count t"""

    theta_hat: np.ndarray
    cov: np.ndarray
    step_count: int = 0

    def __post_init__(self):
        theta = np.array(self.theta_hat, dtype=np.float64)
        cov = np.array(self.cov, dtype=np.float64)
        d = theta.shape[0]
        if theta.ndim != 1 or cov.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d} for a length-{d} estimate, got {cov.shape}")
        theta.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, 'theta_hat', theta)
        object.__setattr__(self, 'cov', cov)

    @property
    def dim(self) -> int:
        return self.theta_hat.shape[0]


@dataclass(frozen=True)
class StepDiagnostics:
    """Intermediate quantities of one filter iteration"""

    pred_cov: np.ndarray
    obs_noise: np.ndarray
    predicted_obs: np.ndarray
    residual: np.ndarray
    jacobian: np.ndarray
    innovation_cov: np.ndarray
    gain: np.ndarray

    @property
    def innovation_norm(self) -> float:
        return float(np.linalg.norm(self.residual))


def init_state(d: int, theta0, cfg: KovaConfig) -> OptimizerState:
    """
    Start a new estimation procedure: θ̂_{0|0} = θ₀, P_{0|0} = p₀·I, t = 0.
    """
    if d < 1:
        raise ValueError(f"parameter dimension must be >= 1, got {d}")
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta0.shape != (d,):
        raise ValueError(f"initial parameters must have length {d}, got shape {theta0.shape}")
    return OptimizerState(theta_hat=theta0, cov=cfg.initial_cov_scale * np.eye(d), step_count=0)


def warm_start(previous: OptimizerState) -> OptimizerState:
    """Begin evaluating a new policy from the last policy's estimate and covariance"""
    return OptimizerState(theta_hat=previous.theta_hat.copy(), cov=previous.cov.copy(), step_count=0)


def predict(state: OptimizerState, noise: NoiseModel) -> np.ndarray:
    """Predicted error covariance P_{t|t-1} = P_{t-1|t-1} + P_v"""
    if noise.evolution == ZERO_EVOLUTION or noise.eta == 0.0:
        return state.cov.copy()
    return state.cov + (noise.eta / (1.0 - noise.eta)) * state.cov


def observation_noise(noise: NoiseModel, batch: Batch) -> np.ndarray:
    """
    Diagonal observation-noise covariance P_n for a batch.

    Raises:
        ValueError: a max-ratio denominator ratio_i + ε is not positive
    """
    n = batch.size
    if noise.observation == BATCH_SIZE_NOISE:
        return np.diag(np.full(n, float(n)))

    denominators = batch.ratio_vector() + noise.epsilon
    if np.any(denominators <= 0):
        bad = int(np.argmax(denominators <= 0))
        raise ValueError(
            f"max-ratio noise needs ratio + epsilon > 0; sample {bad} has {denominators[bad]}"
        )
    sigma = n * np.maximum(1.0, 1.0 / denominators)
    return np.diag(sigma)


def innovation_covariance(pred_cov: np.ndarray, J: np.ndarray, obs_noise: np.ndarray) -> np.ndarray:
    """P_ỹ = Jᵀ P_{t|t-1} J + P_n, symmetrized"""
    S = J.T @ pred_cov @ J + obs_noise
    return 0.5 * (S + S.T)


def _factorize(S: np.ndarray, jitter: Optional[float]):
    try:
        return cho_factor(S, lower=True, check_finite=True), S
    except (LinAlgError, ValueError):
        n = S.shape[0]
        load = jitter if jitter is not None else 1e-9 * max(np.trace(S), 0.0) / n
        logger.warning("Innovation covariance not positive definite; retrying with jitter %.3e", load)
        loaded = S + load * np.eye(n)
        try:
            return cho_factor(loaded, lower=True, check_finite=True), loaded
        except (LinAlgError, ValueError):
            condition = float(np.linalg.cond(S)) if np.all(np.isfinite(S)) else float('inf')
            raise GainComputationError(
                f"innovation covariance ({n}x{n}) is not positive definite after jitter "
                f"{load:.3e}; condition number {condition:.3e}",
                condition_number=condition,
            )


def _gain_from_factor(pred_cov: np.ndarray, J: np.ndarray, factor) -> np.ndarray:
    cross_cov = pred_cov @ J
    return cho_solve(factor, cross_cov.T).T


def kalman_gain(pred_cov: np.ndarray, J: np.ndarray, obs_noise: np.ndarray,
                jitter: Optional[float] = None) -> np.ndarray:
    """
    Kalman gain K = P_{t|t-1} J (Jᵀ P_{t|t-1} J + P_n)^{-1}.

    The N × N innovation matrix is Cholesky-factorized; if that fails, jitter·I
    is added and the factorization retried once.

    Args:
        pred_cov: d × d predicted covariance
        J: d × N Jacobian
        obs_noise: N × N observation-noise covariance (need not be diagonal)
        jitter: Diagonal load for the retry (default 1e-9·trace(P_ỹ)/N)

    Returns:
        d × N gain matrix

    Raises:
        GainComputationError: factorization failed after the retry
    """
    pred_cov = np.asarray(pred_cov, dtype=np.float64)
    J = np.asarray(J, dtype=np.float64)
    obs_noise = np.asarray(obs_noise, dtype=np.float64)
    d, n = J.shape
    if pred_cov.shape != (d, d) or obs_noise.shape != (n, n):
        raise ValueError(
            f"shape mismatch: P {pred_cov.shape}, J {J.shape}, P_n {obs_noise.shape}"
        )
    factor, _ = _factorize(innovation_covariance(pred_cov, J, obs_noise), jitter)
    return _gain_from_factor(pred_cov, J, factor)


def _repair_covariance(cov: np.ndarray) -> np.ndarray:
    smallest = float(eigvalsh(cov)[0])
    if smallest >= -PSD_TOLERANCE:
        return cov
    logger.warning("Covariance lost positive semi-definiteness (min eigenvalue %.3e); repairing",
                   smallest)
    return cov + (-smallest) * np.eye(cov.shape[0])


def kova_step(state: OptimizerState, batch: Batch, model: ValueModel,
              cfg: KovaConfig) -> Tuple[OptimizerState, StepDiagnostics]:
    """
    One full filter iteration, returning the successor state and its diagnostics.

    Raises:
        GainComputationError: the innovation covariance could not be factorized
        DivergenceError: the update produced non-finite values
    """
    if model.param_dim != state.dim:
        raise ValueError(f"model has {model.param_dim} parameters but state has {state.dim}")

    theta_pred = as_param_vector(model, state.theta_hat)
    pred_cov = predict(state, cfg.noise)
    obs_noise = observation_noise(cfg.noise, batch)

    predicted_obs = forward(model, theta_pred, batch.inputs)
    J = jacobian(model, theta_pred, batch.inputs)
    residual = batch.targets - predicted_obs

    S = innovation_covariance(pred_cov, J, obs_noise)
    factor, S_used = _factorize(S, cfg.jitter)
    K = _gain_from_factor(pred_cov, J, factor)

    alpha = cfg.learning_rate
    theta_new = theta_pred + alpha * (K @ residual)
    cov_new = pred_cov - alpha * (K @ S_used @ K.T)
    cov_new = 0.5 * (cov_new + cov_new.T)

    if not (np.all(np.isfinite(theta_new)) and np.all(np.isfinite(cov_new))):
        raise DivergenceError(f"KOVA update {state.step_count + 1} produced non-finite values")
    cov_new = _repair_covariance(cov_new)

    diagnostics = StepDiagnostics(
        pred_cov=pred_cov,
        obs_noise=obs_noise,
        predicted_obs=predicted_obs,
        residual=residual,
        jacobian=J,
        innovation_cov=S_used,
        gain=K,
    )
    new_state = OptimizerState(theta_hat=theta_new, cov=cov_new, step_count=state.step_count + 1)
    return new_state, diagnostics


def update(state: OptimizerState, batch: Batch, model: ValueModel, cfg: KovaConfig) -> OptimizerState:
    """Apply one KOVA iteration to a batch and return the successor state"""
    new_state, _ = kova_step(state, batch, model, cfg)
    return new_state


def loewner_decrease_check(prev_pred: np.ndarray, new_cov: np.ndarray,
                           tolerance: float = PSD_TOLERANCE) -> bool:
    """True iff new_cov ⪯ prev_pred up to tolerance (max eigenvalue of the difference)"""
    diff = np.asarray(new_cov, dtype=np.float64) - np.asarray(prev_pred, dtype=np.float64)
    diff = 0.5 * (diff + diff.T)
    return bool(eigvalsh(diff)[-1] <= tolerance)
