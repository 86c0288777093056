"""
Shared pytest fixtures for the KOVA policy-evaluation tests
"""

import os
import sys

import numpy as np
import pytest

# Add project root to path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..'))

from utilities import envs
from utilities.config import ExperimentConfig
from utilities.targets import Batch, Trajectory, Transition
from utilities.valuefunc import ValueModel, init_params


@pytest.fixture
def rng():
    """Seeded random generator"""
    return np.random.default_rng(0)


@pytest.fixture
def tabular_model():
    """Tabular value model over 4 one-hot states"""
    return ValueModel.tabular(4)


@pytest.fixture
def small_mlp():
    """2-input network with one hidden layer of 4 tanh units"""
    return ValueModel.mlp(2, [4])


@pytest.fixture
def deep_mlp():
    """4-input network with two hidden layers of 16 tanh units"""
    return ValueModel.mlp(4, [16, 16])


@pytest.fixture
def mlp_params(small_mlp):
    """Seed-0 parameters for small_mlp"""
    return init_params(small_mlp, 0, 0.8)


@pytest.fixture
def linear_batch(rng):
    """Random batch of 8 inputs in 4 dimensions"""
    return Batch(inputs=rng.normal(size=(8, 4)), targets=rng.normal(size=8))


@pytest.fixture
def chain():
    """5-state chain, γ = 0.9, no slip"""
    return envs.chain_mdp(5, 0.9)


@pytest.fixture
def chain_policy():
    """Uniform policy over the chain's two actions"""
    return envs.uniform_policy(5, 2)


def make_trajectory(states, rewards, n_states=4, terminal_last=False):
    """Trajectory over one-hot states; len(states) == len(rewards) + 1"""
    transitions = []
    for i, reward in enumerate(rewards):
        transitions.append(Transition(
            state=envs.one_hot(states[i], n_states),
            action=envs.one_hot(0, 2),
            reward=reward,
            next_state=envs.one_hot(states[i + 1], n_states),
            terminal=terminal_last and i == len(rewards) - 1,
        ))
    return Trajectory(transitions)


@pytest.fixture
def short_trajectory():
    """States 0 -> 1 -> 2 -> 3 -> 0 with unit rewards"""
    return make_trajectory([0, 1, 2, 3, 0], [1.0, 1.0, 1.0, 1.0])


@pytest.fixture
def fast_chain_config(tmp_path):
    """Chain config small enough for quick harness runs"""
    return ExperimentConfig(iterations=20, batch_size=8, rollout_length=20,
                            output=str(tmp_path / 'metrics.csv'), seed=7)
