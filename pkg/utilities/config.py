"""
Experiment Configuration

Parses the flat ``key = value`` experiment files (grammar in docs/config.md)
into an ExperimentConfig and builds the MDP, policy, model, target spec and
optimizer settings a run needs.

Every key has a default, so an empty file is a valid config. Unknown keys,
duplicate keys and unparsable values raise ConfigError with the source and
line number.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional, Tuple

import numpy as np

from utilities import envs
from utilities.errors import ConfigError
from utilities.kova import (BATCH_SIZE_NOISE, FADING_MEMORY, MAX_RATIO_NOISE, ZERO_EVOLUTION,
                            KovaConfig, NoiseModel)
from utilities.targets import GAE, KSTEP, TargetSpec
from utilities.valuefunc import ValueModel

logger = logging.getLogger(__name__)

CHAIN = 'chain'
RANDOM = 'random'
UNIFORM = 'uniform'
TABULAR = 'tabular'
MLP = 'mlp'
SAMPLED = 'sampled'
EXPECTED = 'expected'
KOVA = 'kova'
SGD = 'sgd'
SAME = 'same'


def _choice(*options: str) -> Callable[[str], str]:
    def convert(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text
    return convert


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered not in ('true', 'false'):
        raise ValueError("expected true or false")
    return lowered == 'true'


def _widths(text: str) -> Tuple[int, ...]:
    widths = tuple(int(part) for part in text.split(',') if part.strip())
    if not widths or any(w < 1 for w in widths):
        raise ValueError("expected comma-separated positive integers")
    return widths


def _optional_float(text: str) -> Optional[float]:
    return None if text == 'auto' else float(text)


# key -> (attribute, default text, converter)
SCHEMA: Dict[str, Tuple[str, str, Callable]] = {
    'env.type': ('env_type', CHAIN, _choice(CHAIN, RANDOM)),
    'env.n_states': ('n_states', '5', int),
    'env.n_actions': ('n_actions', '2', int),
    'env.slip': ('slip', '0.0', float),
    'env.seed': ('env_seed', '0', int),
    'gamma': ('gamma', '0.9', float),
    'policy.type': ('policy_type', UNIFORM, _choice(UNIFORM, RANDOM)),
    'policy.seed': ('policy_seed', '0', int),
    'policy.new': ('new_policy_type', SAME, _choice(SAME, UNIFORM, RANDOM)),
    'policy.new_seed': ('new_policy_seed', '1', int),
    'model.type': ('model_type', TABULAR, _choice(TABULAR, MLP)),
    'model.hidden': ('hidden', '16,16', _widths),
    'model.init_scale': ('init_scale', '0.1', float),
    'target.type': ('target_type', KSTEP, _choice(KSTEP, GAE)),
    'target.k': ('k', '5', int),
    'target.lambda': ('lam', '0.95', float),
    'target.source': ('target_source', SAMPLED, _choice(SAMPLED, EXPECTED)),
    'target.tau': ('tau', '1.0', float),
    'rollout.length': ('rollout_length', '50', int),
    'rollout.per_iteration': ('rollouts_per_iteration', '1', int),
    'rollout.capacity': ('rollout_capacity', '20', int),
    'optimizer.type': ('optimizer', KOVA, _choice(KOVA, SGD)),
    'optimizer.kova.alpha': ('kova_alpha', '1.0', float),
    'optimizer.kova.p0': ('p0', '1.0', float),
    'optimizer.kova.evolution': ('evolution', FADING_MEMORY, _choice(FADING_MEMORY, ZERO_EVOLUTION)),
    'optimizer.kova.eta': ('eta', '0.01', float),
    'optimizer.kova.obs_noise': ('obs_noise', BATCH_SIZE_NOISE, _choice(BATCH_SIZE_NOISE, MAX_RATIO_NOISE)),
    'optimizer.kova.epsilon': ('epsilon', '1e-8', float),
    'optimizer.kova.jitter': ('jitter', 'auto', _optional_float),
    'optimizer.sgd.alpha': ('sgd_alpha', '0.1', float),
    'batch_size': ('batch_size', '32', int),
    'iterations': ('iterations', '500', int),
    'seed': ('seed', '0', int),
    'output': ('output', 'metrics.csv', str),
    'record_timing': ('record_timing', 'false', _bool),
}


@dataclass
class ExperimentConfig:
    """One policy-evaluation run, fully specified"""

    env_type: str = CHAIN
    n_states: int = 5
    n_actions: int = 2
    slip: float = 0.0
    env_seed: int = 0
    gamma: float = 0.9
    policy_type: str = UNIFORM
    policy_seed: int = 0
    new_policy_type: str = SAME
    new_policy_seed: int = 1
    model_type: str = TABULAR
    hidden: Tuple[int, ...] = (16, 16)
    init_scale: float = 0.1
    target_type: str = KSTEP
    k: int = 5
    lam: float = 0.95
    target_source: str = SAMPLED
    tau: float = 1.0
    rollout_length: int = 50
    rollouts_per_iteration: int = 1
    rollout_capacity: int = 20
    optimizer: str = KOVA
    kova_alpha: float = 1.0
    p0: float = 1.0
    evolution: str = FADING_MEMORY
    eta: float = 0.01
    obs_noise: str = BATCH_SIZE_NOISE
    epsilon: float = 1e-8
    jitter: Optional[float] = None
    sgd_alpha: float = 0.1
    batch_size: int = 32
    iterations: int = 500
    seed: int = 0
    output: str = 'metrics.csv'
    record_timing: bool = False
    source: str = field(default='<defaults>', compare=False)

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Raise ConfigError for values no run could use"""
        checks = [
            (self.n_states >= (2 if self.env_type == CHAIN else 1), 'env.n_states', "too few states"),
            (self.env_type != CHAIN or self.n_actions == 2, 'env.n_actions', "chain MDPs have exactly 2 actions"),
            (self.n_actions >= 1, 'env.n_actions', "must be >= 1"),
            (0.0 <= self.slip < 0.5, 'env.slip', "must be in [0, 0.5)"),
            (0.0 < self.gamma < 1.0, 'gamma', "must be in (0, 1)"),
            (self.init_scale >= 0, 'model.init_scale', "must be >= 0"),
            (self.k >= 1, 'target.k', "must be >= 1"),
            (0.0 <= self.lam <= 1.0, 'target.lambda', "must be in [0, 1]"),
            (0.0 < self.tau <= 1.0, 'target.tau', "must be in (0, 1]"),
            (self.rollout_length >= 1, 'rollout.length', "must be >= 1"),
            (self.rollouts_per_iteration >= 1, 'rollout.per_iteration', "must be >= 1"),
            (self.rollout_capacity >= 1, 'rollout.capacity', "must be >= 1"),
            (0.0 < self.kova_alpha <= 1.0, 'optimizer.kova.alpha', "must be in (0, 1]"),
            (self.p0 >= 0, 'optimizer.kova.p0', "must be >= 0"),
            (0.0 <= self.eta < 1.0, 'optimizer.kova.eta', "must be in [0, 1)"),
            (self.obs_noise != MAX_RATIO_NOISE or self.new_policy_type != SAME, 'optimizer.kova.obs_noise',
             "max-ratio needs policy.new (with policy.new = same every ratio is 1)"),
            (np.isfinite(self.epsilon) and self.epsilon >= 0, 'optimizer.kova.epsilon', "must be finite and >= 0"),
            (self.jitter is None or self.jitter >= 0, 'optimizer.kova.jitter', "must be >= 0 or auto"),
            (self.sgd_alpha > 0, 'optimizer.sgd.alpha', "must be > 0"),
            (self.batch_size >= 1, 'batch_size', "must be >= 1"),
            (self.iterations >= 0, 'iterations', "must be >= 0"),
            (bool(self.output), 'output', "must not be empty"),
        ]
        for ok, key, message in checks:
            if not ok:
                raise ConfigError(f"{self.source}: {key} {message}")

    def to_mapping(self) -> Dict[str, str]:
        """Key -> value text, the inverse of from_mapping"""
        mapping = {}
        for key, (attr, _, _) in SCHEMA.items():
            value = getattr(self, attr)
            if isinstance(value, tuple):
                text = ','.join(str(v) for v in value)
            elif isinstance(value, bool):
                text = 'true' if value else 'false'
            elif value is None:
                text = 'auto'
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            mapping[key] = text
        return mapping

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], source: str = '<mapping>',
                     lines: Optional[Mapping[str, int]] = None) -> 'ExperimentConfig':
        kwargs = {}
        for key, text in values.items():
            if key not in SCHEMA:
                raise ConfigError(f"{source}: unknown key {key!r}")
            attr, _, convert = SCHEMA[key]
            try:
                kwargs[attr] = convert(text)
            except ValueError as exc:
                where = f"{source}:{lines[key]}" if lines and key in lines else source
                raise ConfigError(f"{where}: bad value {text!r} for {key}: {exc}") from None
        return cls(source=source, **kwargs)

    def with_overrides(self, overrides: Mapping[str, str]) -> 'ExperimentConfig':
        mapping = self.to_mapping()
        mapping.update(overrides)
        return ExperimentConfig.from_mapping(mapping, source=self.source)

    # --- builders -------------------------------------------------------------

    def build_mdp(self) -> envs.MdpSpec:
        if self.env_type == CHAIN:
            return envs.chain_mdp(self.n_states, self.gamma, self.slip)
        return envs.random_mdp(self.env_seed, self.n_states, self.n_actions, self.gamma)

    def build_policy(self, mdp: envs.MdpSpec) -> envs.PolicySpec:
        if self.policy_type == UNIFORM:
            return envs.uniform_policy(mdp.n_states, mdp.n_actions)
        return envs.random_policy(self.policy_seed, mdp.n_states, mdp.n_actions)

    def build_new_policy(self, mdp: envs.MdpSpec) -> Optional[envs.PolicySpec]:
        """Updated policy π_new whose ratios π/π_new label each transition; None for same"""
        if self.new_policy_type == SAME:
            return None
        if self.new_policy_type == UNIFORM:
            return envs.uniform_policy(mdp.n_states, mdp.n_actions)
        return envs.random_policy(self.new_policy_seed, mdp.n_states, mdp.n_actions)

    def build_model(self, mdp: envs.MdpSpec) -> ValueModel:
        if self.model_type == TABULAR:
            return ValueModel.tabular(mdp.n_states)
        return ValueModel.mlp(mdp.n_states, self.hidden)

    def target_spec(self) -> TargetSpec:
        return TargetSpec(type=self.target_type, k=self.k, gamma=self.gamma, lam=self.lam)

    def kova_config(self) -> KovaConfig:
        noise = NoiseModel(evolution=self.evolution,
                           eta=self.eta if self.evolution == FADING_MEMORY else 0.0,
                           observation=self.obs_noise, epsilon=self.epsilon)
        return KovaConfig(learning_rate=self.kova_alpha, initial_cov_scale=self.p0,
                          noise=noise, jitter=self.jitter)


def parse_config_text(text: str, source: str = '<string>') -> ExperimentConfig:
    """
    Parse ``key = value`` lines. ``#`` starts a comment; blank lines are skipped.
    """
    values: Dict[str, str] = {}
    lines: Dict[str, int] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if not key or not value:
            raise ConfigError(f"{source}:{number}: empty key or value in {raw.strip()!r}")
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{number}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r} (first set on line {lines[key]})")
        values[key] = value
        lines[key] = number
    logger.debug("Parsed %d config keys from %s", len(values), source)
    return ExperimentConfig.from_mapping(values, source=source, lines=lines)


def load_config(path: str) -> ExperimentConfig:
    """Read and parse a config file; a missing or unreadable file is a ConfigError"""
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=path)


