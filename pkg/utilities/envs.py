"""
Finite MDP Testbeds

Small, exactly solvable Markov decision processes for desk-scale policy
evaluation:

- chain_mdp: n-state chain with left/right moves and slip probability
- random_mdp: seeded random transition rows and rewards

The exact value oracle solves the linear Bellman system (I − γP^π)V = R^π.
Rollouts encode states and actions one-hot so they plug straight into the
tabular value models.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve

from utilities.targets import Trajectory, Transition

logger = logging.getLogger(__name__)

LEFT = 0
RIGHT = 1

SIMPLEX_TOLERANCE = 1e-12


def _check_rows_on_simplex(probs: np.ndarray, name: str):
    if np.any(probs < 0):
        raise ValueError(f"{name} has negative probabilities")
    row_sums = probs.sum(axis=-1)
    if np.max(np.abs(row_sums - 1.0)) > SIMPLEX_TOLERANCE:
        raise ValueError(f"{name} rows must sum to 1 (worst row sums to {row_sums.flat[np.argmax(np.abs(row_sums - 1.0))]})")


@dataclass(frozen=True)
class MdpSpec:
    """Finite MDP {S, A, P, R, γ} with P[s, a, s′] and expected rewards R[s, a]"""

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=np.float64)
        R = np.array(self.reward, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition tensor must be |S|x|A|x|S|, got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValueError(f"reward matrix must be {P.shape[:2]}, got {R.shape}")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        _check_rows_on_simplex(P, "transition tensor")
        P.flags.writeable = False
        R.flags.writeable = False
        object.__setattr__(self, 'transition', P)
        object.__setattr__(self, 'reward', R)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class PolicySpec:
    """Stochastic policy π(a|s) as an |S| × |A| row-stochastic matrix"""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2:
            raise ValueError(f"policy matrix must be 2-D, got shape {probs.shape}")
        _check_rows_on_simplex(probs, "policy matrix")
        probs.flags.writeable = False
        object.__setattr__(self, 'probs', probs)

    def check_compatible(self, mdp: MdpSpec):
        if self.probs.shape != (mdp.n_states, mdp.n_actions):
            raise ValueError(
                f"policy is {self.probs.shape} but the MDP has {mdp.n_states} states "
                f"and {mdp.n_actions} actions"
            )


def chain_mdp(n: int, gamma: float, slip: float = 0.0) -> MdpSpec:
    """
    n-state chain with actions left (0) and right (1).

    The intended move succeeds with probability 1 − slip and goes the other
    way otherwise; moves off either end stay put. Entering the last state from
    another state pays reward 1, so R[s, a] is the probability of that entry.
    """
    if n < 2:
        raise ValueError(f"chain needs at least 2 states, got {n}")
    if not 0.0 <= slip < 0.5:
        raise ValueError(f"slip must be in [0, 0.5), got {slip}")

    P = np.zeros((n, 2, n))
    for s in range(n):
        left, right = max(s - 1, 0), min(s + 1, n - 1)
        P[s, LEFT, left] += 1.0 - slip
        P[s, LEFT, right] += slip
        P[s, RIGHT, right] += 1.0 - slip
        P[s, RIGHT, left] += slip

    R = P[:, :, n - 1].copy()
    R[n - 1, :] = 0.0
    return MdpSpec(transition=P, reward=R, gamma=gamma)


def random_mdp(seed: int, n_states: int, n_actions: int, gamma: float) -> MdpSpec:
    """Seeded MDP with normalized positive-uniform transition rows and U[0, 1] rewards"""
    if n_states < 1 or n_actions < 1:
        raise ValueError(f"need at least one state and action, got {n_states}x{n_actions}")
    rng = np.random.default_rng(seed)
    weights = rng.uniform(1e-3, 1.0, size=(n_states, n_actions, n_states))
    P = weights / weights.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return MdpSpec(transition=P, reward=R, gamma=gamma)


def uniform_policy(n_states: int, n_actions: int) -> PolicySpec:
    return PolicySpec(np.full((n_states, n_actions), 1.0 / n_actions))


def random_policy(seed: int, n_states: int, n_actions: int) -> PolicySpec:
    """Seeded stochastic policy with strictly positive action probabilities"""
    rng = np.random.default_rng(seed)
    weights = rng.uniform(1e-3, 1.0, size=(n_states, n_actions))
    return PolicySpec(weights / weights.sum(axis=1, keepdims=True))


def policy_transition_matrix(mdp: MdpSpec, policy: PolicySpec) -> np.ndarray:
    """P^π[s, s′] = Σ_a π(a|s)·P[s, a, s′]"""
    policy.check_compatible(mdp)
    return np.einsum('sa,sat->st', policy.probs, mdp.transition)


def policy_reward(mdp: MdpSpec, policy: PolicySpec) -> np.ndarray:
    """R^π[s] = Σ_a π(a|s)·R[s, a]"""
    policy.check_compatible(mdp)
    return np.sum(policy.probs * mdp.reward, axis=1)


def exact_value(mdp: MdpSpec, policy: PolicySpec) -> np.ndarray:
    """V^π from the linear Bellman system (I − γP^π)V = R^π"""
    P_pi = policy_transition_matrix(mdp, policy)
    R_pi = policy_reward(mdp, policy)
    return solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, R_pi)


def expected_kstep_values(mdp: MdpSpec, policy: PolicySpec, values: np.ndarray, k: int) -> np.ndarray:
    """
    Noiseless k-step targets: the Bellman operator T^π applied k times to values.

    Equals the expectation of the sampled k-step target Σγ^i r_i + γ^k V(s_k)
    for every start state.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    P_pi = policy_transition_matrix(mdp, policy)
    R_pi = policy_reward(mdp, policy)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"values must have length {mdp.n_states}, got shape {v.shape}")
    for _ in range(k):
        v = R_pi + mdp.gamma * (P_pi @ v)
    return v


def expected_gae_values(mdp: MdpSpec, policy: PolicySpec, values: np.ndarray, lam: float) -> np.ndarray:
    """
    Noiseless GAE targets without truncation: V + Σ_i (γλP^π)^i (R^π + γP^πV − V).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    P_pi = policy_transition_matrix(mdp, policy)
    R_pi = policy_reward(mdp, policy)
    v = np.asarray(values, dtype=np.float64)
    if v.shape != (mdp.n_states,):
        raise ValueError(f"values must have length {mdp.n_states}, got shape {v.shape}")
    td_error = R_pi + mdp.gamma * (P_pi @ v) - v
    return v + solve(np.eye(mdp.n_states) - mdp.gamma * lam * P_pi, td_error)


def stationary_distribution(mdp: MdpSpec, policy: PolicySpec) -> np.ndarray:
    """Stationary state distribution μ with μᵀP^π = μᵀ and Σμ = 1 (least squares)"""
    P_pi = policy_transition_matrix(mdp, policy)
    n = mdp.n_states
    A = np.vstack([P_pi.T - np.eye(n), np.ones((1, n))])
    b = np.concatenate([np.zeros(n), [1.0]])
    mu, *_ = np.linalg.lstsq(A, b, rcond=None)
    return np.clip(mu, 0.0, None) / np.clip(mu, 0.0, None).sum()


def one_hot(index: int, size: int) -> np.ndarray:
    if not 0 <= index < size:
        raise ValueError(f"index {index} out of range for size {size}")
    vector = np.zeros(size)
    vector[index] = 1.0
    return vector


def rollout(mdp: MdpSpec, policy: PolicySpec, start: int, length: int,
            seed: Optional[int] = None, rng: Optional[np.random.Generator] = None,
            ratio_policy: Optional[PolicySpec] = None) -> Trajectory:
    """
    Sample a length-T trajectory under P and π from a start state.

    The tasks are continuing, so no transition is terminal. Rewards are the
    MDP's expected rewards R[s, a].

    Args:
        seed: Seeds a fresh stream; ignored when ``rng`` is given
        rng: Existing stream to continue
        ratio_policy: Updated policy π_new; each transition records
            π(a|s)/π_new(a|s). Without it every ratio is 1.

    Returns:
        Trajectory with one-hot state, next_state and action vectors
    """
    policy.check_compatible(mdp)
    if ratio_policy is not None:
        ratio_policy.check_compatible(mdp)
        if np.any((ratio_policy.probs == 0) & (policy.probs > 0)):
            raise ValueError("ratio_policy must be positive wherever the rollout policy is")
    if seed is None and rng is None:
        raise ValueError("rollout needs a seed or an rng")
    if length < 1:
        raise ValueError(f"rollout length must be >= 1, got {length}")
    if not 0 <= start < mdp.n_states:
        raise ValueError(f"start state {start} out of range for {mdp.n_states} states")
    rng = rng if rng is not None else np.random.default_rng(seed)

    transitions = []
    s = start
    for _ in range(length):
        a = int(rng.choice(mdp.n_actions, p=policy.probs[s]))
        s_next = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        ratio = 1.0 if ratio_policy is None else float(policy.probs[s, a] / ratio_policy.probs[s, a])
        transitions.append(Transition(
            state=one_hot(s, mdp.n_states),
            action=one_hot(a, mdp.n_actions),
            reward=float(mdp.reward[s, a]),
            next_state=one_hot(s_next, mdp.n_states),
            ratio=ratio,
        ))
        s = s_next
    return Trajectory(transitions)


def _vector_sample(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    # one draw per row of probs
    cdf = np.cumsum(probs, axis=1)
    draws = rng.random(probs.shape[0])[:, None]
    return np.minimum((draws >= cdf).sum(axis=1), probs.shape[1] - 1)


def monte_carlo_returns(mdp: MdpSpec, policy: PolicySpec, start: int, n_rollouts: int,
                        seed: int, horizon: Optional[int] = None) -> np.ndarray:
    """
    Discounted returns of independent rollouts from one start state.

    The horizon defaults to the point where γ^H drops below 1e-10.
    """
    policy.check_compatible(mdp)
    if horizon is None:
        horizon = int(np.ceil(np.log(1e-10) / np.log(mdp.gamma)))
    rng = np.random.default_rng(seed)
    states = np.full(n_rollouts, start, dtype=int)
    returns = np.zeros(n_rollouts)
    discount = 1.0
    for _ in range(horizon):
        actions = _vector_sample(rng, policy.probs[states])
        returns += discount * mdp.reward[states, actions]
        states = _vector_sample(rng, mdp.transition[states, actions])
        discount *= mdp.gamma
    logger.debug("Simulated %d rollouts of %d steps from state %d", n_rollouts, horizon, start)
    return returns
