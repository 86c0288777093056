"""
Bellman Target Labels and Sample Generation

Builds the target labels y(u) that KOVA and the MLE baseline regress onto:

- k-step V-evaluation:  Σ_{i<k} γ^i r_{m+i} + γ^k V(s_{m+k}; θ′)
- GAE:                  Σ_i (γλ)^i (r_{m+i} + γV(s_{m+i+1}; θ′) − V(s_{m+i}; θ′)) + V(s_m; θ′)
- 1-step Q-evaluation:  r + γ Q(s′, π(s′); θ′)
- optimality (max-Q):   r + γ max_a′ Q(s′, a′; θ′)

θ′ is always a frozen target-network copy supplied by the caller. Terminal
transitions bootstrap with value 0; GAE sums are truncated at the trajectory
end, bootstrapping from the final next_state unless it is terminal.

The SampleGenerator plays the role of the samples generator 𝓡: it stores either
whole trajectories (on-policy rollouts) or individual transitions (experience
replay) and draws batches of N anchors with its own seeded random stream.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utilities.errors import InsufficientDataError
from utilities.valuefunc import ValueModel, forward

logger = logging.getLogger(__name__)


KSTEP = 'kstep'
GAE = 'gae'
Q1 = 'q1'
MAXQ = 'maxq'
TARGET_TYPES = (KSTEP, GAE, Q1, MAXQ)

TRAJECTORY_STORE = 'trajectory'
TRANSITION_REPLAY = 'replay'


@dataclass(frozen=True)
class Transition:
    """One environment step (s, a, r, s′, terminal) with its policy ratio π_old/π_new"""

    state: np.ndarray
    action: Union[np.ndarray, int]
    reward: float
    next_state: np.ndarray
    terminal: bool = False
    ratio: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError(f"reward must be finite, got {self.reward}")
        if not np.isfinite(self.ratio) or self.ratio < 0:
            raise ValueError(f"ratio must be finite and >= 0, got {self.ratio}")


class Trajectory:
    """Ordered transitions from one rollout under a fixed policy"""

    def __init__(self, transitions: Sequence[Transition]):
        transitions = list(transitions)
        for m in range(len(transitions) - 1):
            current, following = transitions[m], transitions[m + 1]
            if current.terminal:
                continue
            if not np.array_equal(current.next_state, following.state):
                raise ValueError(
                    f"trajectory is discontinuous at step {m}: next_state differs from the "
                    f"state of step {m + 1}"
                )
        self.transitions = transitions

    def __len__(self) -> int:
        return len(self.transitions)

    def __getitem__(self, index: int) -> Transition:
        return self.transitions[index]

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.transitions])

    @property
    def ends_terminal(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].terminal


@dataclass
class Batch:
    """N inputs with their target labels and optional π_old/π_new ratios"""

    inputs: np.ndarray
    targets: np.ndarray
    ratios: Optional[np.ndarray] = None
    anchors: List[Tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        n = self.targets.shape[0]
        if n < 1:
            raise ValueError("a batch needs at least one sample")
        if self.inputs.shape[0] != n:
            raise ValueError(f"batch has {self.inputs.shape[0]} inputs but {n} targets")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("batch targets must be finite")
        if self.ratios is not None:
            self.ratios = np.asarray(self.ratios, dtype=np.float64).reshape(-1)
            if self.ratios.shape[0] != n:
                raise ValueError(f"batch has {n} targets but {self.ratios.shape[0]} ratios")

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    def ratio_vector(self) -> np.ndarray:
        """Policy ratios, all ones for pure policy evaluation"""
        return self.ratios if self.ratios is not None else np.ones(self.size)


@dataclass(frozen=True)
class TargetSpec:
    """
    Which target constructor a batch uses, and its parameters.

    next_action maps a next-state vector to the action vector π(s′) (q1 only);
    action_set lists candidate action vectors (maxq only).
    """

    type: str = KSTEP
    k: int = 1
    gamma: float = 0.99
    lam: float = 0.95
    next_action: Optional[Callable[[np.ndarray], np.ndarray]] = None
    action_set: Tuple[np.ndarray, ...] = ()

    def __post_init__(self):
        if self.type not in TARGET_TYPES:
            raise ValueError(f"Unknown target type {self.type!r}; expected one of {TARGET_TYPES}")
        if self.type == KSTEP and self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.type == Q1 and self.next_action is None:
            raise ValueError("q1 targets need a next_action policy")
        if self.type == MAXQ and len(self.action_set) == 0:
            raise ValueError("maxq targets need a non-empty action_set")

    @property
    def uses_trajectories(self) -> bool:
        return self.type in (KSTEP, GAE)


def q_input(state: np.ndarray, action: np.ndarray) -> np.ndarray:
    """State-action input vector [s, a] consumed by Q models"""
    return np.concatenate([np.asarray(state, dtype=np.float64),
                           np.asarray(action, dtype=np.float64)])


def _check_anchor(traj: Trajectory, m: int):
    if not 0 <= m < len(traj):
        raise ValueError(f"anchor index {m} out of range for trajectory of length {len(traj)}")


def kstep_v_target(traj: Trajectory, m: int, k: int, gamma: float,
                   target_theta, model: ValueModel) -> float:
    """
    k-step V-evaluation target from anchor m.

    The bootstrap γ^k V(s_{m+k}; θ′) is dropped when a terminal transition is
    reached within the k steps.

    Raises:
        ValueError: m out of range, or the window runs past a non-terminal
            trajectory end
    """
    _check_anchor(traj, m)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")

    total = 0.0
    discount = 1.0
    for i in range(k):
        index = m + i
        if index >= len(traj):
            raise ValueError(
                f"k-step window [{m}, {m + k}) runs past the end of a non-terminal "
                f"trajectory of length {len(traj)}"
            )
        tr = traj[index]
        total += discount * tr.reward
        discount *= gamma
        if tr.terminal:
            return total

    bootstrap_state = traj[m + k - 1].next_state
    return total + discount * float(forward(model, target_theta, [bootstrap_state])[0])


def gae_target(traj: Trajectory, m: int, gamma: float, lam: float,
               target_theta, model: ValueModel) -> float:
    """
    GAE-based target from anchor m, computed with θ′ throughout.

    Returns Σ_i (γλ)^i δ′_{m+i} + V(s_m; θ′), where δ′ is the one-step TD error
    under θ′, truncated at the first terminal or the trajectory end.
    """
    _check_anchor(traj, m)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")

    end = len(traj)
    for index in range(m, len(traj)):
        if traj[index].terminal:
            end = index + 1
            break

    window = traj.transitions[m:end]
    states = [tr.state for tr in window]
    next_states = [tr.next_state for tr in window]
    values = forward(model, target_theta, states)
    next_values = forward(model, target_theta, next_states)

    advantage = 0.0
    # backward recursion; the terminal (if any) is the last step of the window
    for i in range(len(window) - 1, -1, -1):
        tr = window[i]
        bootstrap = 0.0 if tr.terminal else next_values[i]
        delta = tr.reward + gamma * bootstrap - values[i]
        advantage = delta + gamma * lam * advantage

    return float(advantage + values[0])


def one_step_q_target(tr: Transition, gamma: float, target_theta, model: ValueModel,
                      policy_next_action) -> float:
    """r + γ Q(s′, π(s′); θ′), with no bootstrap on terminal transitions"""
    if tr.terminal:
        return float(tr.reward)
    u = q_input(tr.next_state, policy_next_action)
    return float(tr.reward + gamma * forward(model, target_theta, [u])[0])


def max_q_target(tr: Transition, gamma: float, target_theta, model: ValueModel,
                 action_set: Sequence) -> float:
    """
    r + γ max_a′ Q(s′, a′; θ′) over a finite action set.

    Ties resolve to the lowest action index.
    """
    if len(action_set) == 0:
        raise ValueError("max_q_target needs a non-empty action set")
    if tr.terminal:
        return float(tr.reward)
    candidates = [q_input(tr.next_state, a) for a in action_set]
    q_values = forward(model, target_theta, candidates)
    best = int(np.argmax(q_values))
    return float(tr.reward + gamma * q_values[best])


class SampleGenerator:
    """
    Seeded store of experience from which batches are drawn.

    source='trajectory' keeps up to ``capacity`` whole trajectories;
    source='replay' keeps up to ``capacity`` individual transitions. The oldest
    entries are evicted first. Sampling is without replacement and depends only
    on the seed and the insertion history.
    """

    def __init__(self, source: str = TRAJECTORY_STORE, capacity: int = 1000, seed: int = 0):
        if source not in (TRAJECTORY_STORE, TRANSITION_REPLAY):
            raise ValueError(f"Unknown sample source {source!r}")
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.source = source
        self.capacity = capacity
        self.seed = seed
        self._rng = np.random.default_rng(seed)
        self._memory = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._memory)

    def add_trajectory(self, traj: Trajectory):
        if self.source == TRAJECTORY_STORE:
            self._memory.append(traj)
        else:
            for tr in traj.transitions:
                self._memory.append(tr)

    def add_transition(self, tr: Transition):
        if self.source != TRANSITION_REPLAY:
            raise ValueError("add_transition() needs a transition-replay generator")
        self._memory.append(tr)

    def usable_anchors(self, spec: TargetSpec) -> List[Tuple[int, int]]:
        """
        Anchors (entry index, step index) that the target constructor can serve.

        k-step anchors need k steps ahead of them, or a terminal within reach.
        Replay entries are addressed as (transition index, 0).
        """
        if self.source == TRANSITION_REPLAY:
            if spec.uses_trajectories:
                raise ValueError(f"{spec.type} targets need a trajectory store")
            return [(i, 0) for i in range(len(self._memory))]

        if not spec.uses_trajectories:
            return [(i, m) for i, traj in enumerate(self._memory) for m in range(len(traj))]

        anchors = []
        for i, traj in enumerate(self._memory):
            length = len(traj)
            terminal_at = next((j for j in range(length) if traj[j].terminal), None)
            for m in range(length):
                if terminal_at is not None and m > terminal_at:
                    break
                if spec.type == GAE:
                    anchors.append((i, m))
                elif m + spec.k <= length or (terminal_at is not None and terminal_at < m + spec.k):
                    anchors.append((i, m))
        return anchors

    def sample_anchors(self, n: int, spec: TargetSpec) -> List[Tuple[int, int]]:
        """Draw n distinct usable anchors"""
        anchors = self.usable_anchors(spec)
        if n > len(anchors):
            raise InsufficientDataError(required=n, available=len(anchors))
        picks = self._rng.choice(len(anchors), size=n, replace=False)
        return [anchors[int(p)] for p in picks]

    def entry(self, index: int):
        return self._memory[index]

    def anchor_input(self, anchor: Tuple[int, int], spec: TargetSpec) -> np.ndarray:
        """The model input u for an anchor: s for V targets, [s, a] for Q targets"""
        tr = self.transition(anchor)
        if spec.uses_trajectories:
            return np.asarray(tr.state, dtype=np.float64)
        return q_input(tr.state, tr.action)

    def anchor_target(self, anchor: Tuple[int, int], spec: TargetSpec,
                      target_theta, model: ValueModel) -> float:
        i, m = anchor
        if spec.type == KSTEP:
            return kstep_v_target(self._memory[i], m, spec.k, spec.gamma, target_theta, model)
        if spec.type == GAE:
            return gae_target(self._memory[i], m, spec.gamma, spec.lam, target_theta, model)
        tr = self.transition(anchor)
        if spec.type == Q1:
            return one_step_q_target(tr, spec.gamma, target_theta, model,
                                     spec.next_action(tr.next_state))
        return max_q_target(tr, spec.gamma, target_theta, model, spec.action_set)

    def transition(self, anchor: Tuple[int, int]) -> Transition:
        i, m = anchor
        entry = self._memory[i]
        return entry[m] if isinstance(entry, Trajectory) else entry


def sample_batch(gen: SampleGenerator, n: int, spec: TargetSpec,
                 target_theta, model: ValueModel) -> Batch:
    """
    Draw N anchors from the generator and label them with the requested targets.

    Args:
        gen: Sample generator holding at least N usable anchors
        n: Batch size N
        spec: Target constructor and its parameters
        target_theta: Frozen target-network parameters θ′
        model: Value approximator used for bootstrapping

    Returns:
        Batch whose anchors record (entry index, step index) per sample

    Raises:
        InsufficientDataError: fewer than N usable anchors are stored
    """
    anchors = gen.sample_anchors(n, spec)
    inputs = np.array([gen.anchor_input(a, spec) for a in anchors])
    targets = np.array([gen.anchor_target(a, spec, target_theta, model) for a in anchors])
    ratios = np.array([gen.transition(a).ratio for a in anchors])
    logger.debug("Sampled %d %s targets from %d stored entries", n, spec.type, len(gen))
    return Batch(inputs=inputs, targets=targets, ratios=ratios, anchors=anchors)
