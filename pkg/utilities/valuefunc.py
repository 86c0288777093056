"""
Value Function Approximators

Parametric observation functions h(u; θ) with forward evaluation and analytic
Jacobians. Two kinds are supported:

- linear-in-features: h(u; θ) = φ(u)ᵀθ for a deterministic feature map φ.
  Tabular value functions are linear models over one-hot inputs.
- multilayer perceptron: tanh hidden layers and a single linear output.

Parameter layout (shared by every module):
    layer by layer from the input side; for each layer the weight matrix
    W (shape out × in) flattened row-major, followed by the bias vector b.
    A linear model's θ is simply the coefficient vector of φ(u).

Jacobians are returned as d × N matrices: column i is ∇_θ h(u_i; θ).
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np


LINEAR = 'linear'
MLP = 'mlp'

FeatureMap = Callable[[np.ndarray], np.ndarray]


def identity_features(u: np.ndarray) -> np.ndarray:
    """Feature map returning the input itself"""
    return np.asarray(u, dtype=np.float64)


def state_action_one_hot(n_states: int, n_actions: int) -> FeatureMap:
    """
    Feature map for tabular Q-functions.

    Inputs are [one_hot(s), one_hot(a)] (length n_states + n_actions); the
    feature vector is the one-hot encoding of the pair (s, a), i.e. the
    Kronecker product of the two blocks.
    """
    def features(u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return np.kron(u[:n_states], u[n_states:n_states + n_actions])

    return features


class ValueModel:
    """
    Immutable description of a value approximator.

    Use the constructors ``ValueModel.linear``, ``ValueModel.tabular`` and
    ``ValueModel.mlp`` rather than calling ``__init__`` directly.
    """

    def __init__(self, kind: str, input_dim: int,
                 layer_widths: Sequence[int] = (),
                 feature_map: Optional[FeatureMap] = None,
                 feature_dim: Optional[int] = None):
        if kind not in (LINEAR, MLP):
            raise ValueError(f"Unknown model kind: {kind!r} (expected 'linear' or 'mlp')")
        if input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {input_dim}")
        if kind == MLP:
            widths = tuple(int(w) for w in layer_widths)
            if not widths or any(w < 1 for w in widths):
                raise ValueError(f"MLP needs at least one positive hidden width, got {layer_widths}")
            feature_map = None
            feature_dim = None
        else:
            widths = ()
            if feature_map is None:
                feature_map = identity_features
                feature_dim = input_dim
            if feature_dim is None or feature_dim < 1:
                raise ValueError("Linear models need a positive feature_dim")

        self._kind = kind
        self._input_dim = int(input_dim)
        self._layer_widths = widths
        self._feature_map = feature_map
        self._feature_dim = feature_dim

    @classmethod
    def linear(cls, feature_map: FeatureMap, input_dim: int, feature_dim: int) -> 'ValueModel':
        return cls(LINEAR, input_dim, feature_map=feature_map, feature_dim=feature_dim)

    @classmethod
    def tabular(cls, n_inputs: int) -> 'ValueModel':
        """Linear model with identity features over one-hot encoded inputs"""
        return cls(LINEAR, n_inputs, feature_map=identity_features, feature_dim=n_inputs)

    @classmethod
    def mlp(cls, input_dim: int, hidden: Sequence[int]) -> 'ValueModel':
        return cls(MLP, input_dim, layer_widths=hidden)

    @property
    def kind(self) -> str:
        return self._kind

    @property
    def input_dim(self) -> int:
        return self._input_dim

    @property
    def layer_widths(self) -> Tuple[int, ...]:
        return self._layer_widths

    @property
    def feature_map(self) -> Optional[FeatureMap]:
        return self._feature_map

    @property
    def feature_dim(self) -> Optional[int]:
        return self._feature_dim

    def param_shapes(self) -> List[Tuple[Tuple[int, int], int]]:
        """
        Shapes of each layer's (weight matrix, bias) pair, in layout order.

        Linear models report a single (1 × feature_dim) weight row and no bias.
        """
        if self._kind == LINEAR:
            return [((1, self._feature_dim), 0)]

        sizes = (self._input_dim,) + self._layer_widths + (1,)
        return [((sizes[i + 1], sizes[i]), sizes[i + 1]) for i in range(len(sizes) - 1)]

    @property
    def param_dim(self) -> int:
        """Total number of scalar weights and biases"""
        return sum(rows * cols + bias for (rows, cols), bias in self.param_shapes())

    def features(self, inputs: np.ndarray) -> np.ndarray:
        """Feature matrix (N × feature_dim) of a linear model"""
        if self._kind != LINEAR:
            raise ValueError("features() is only defined for linear models")
        u = _as_inputs(self, inputs)
        if u.shape[0] == 0:
            return np.zeros((0, self._feature_dim))
        phi = np.array([self._feature_map(row) for row in u], dtype=np.float64)
        if phi.shape != (u.shape[0], self._feature_dim):
            raise ValueError(
                f"feature_map returned shape {phi.shape[1:]}, expected ({self._feature_dim},)"
            )
        return phi

    def to_dict(self) -> Dict:
        return {
            'kind': self._kind,
            'input_dim': self._input_dim,
            'layer_widths': list(self._layer_widths),
            'feature_dim': self._feature_dim,
            'param_dim': self.param_dim,
        }

    def __repr__(self) -> str:
        if self._kind == LINEAR:
            return f"ValueModel(linear, input_dim={self._input_dim}, d={self.param_dim})"
        return f"ValueModel(mlp, {self._input_dim}->{self._layer_widths}->1, d={self.param_dim})"


def _as_inputs(model: ValueModel, inputs) -> np.ndarray:
    u = np.asarray(inputs, dtype=np.float64)
    if u.size == 0:
        return np.zeros((0, model.input_dim))
    if u.ndim == 1:
        u = u.reshape(1, -1)
    if u.ndim != 2 or u.shape[1] != model.input_dim:
        raise ValueError(
            f"inputs must have shape (N, {model.input_dim}), got {np.shape(inputs)}"
        )
    return u


def as_param_vector(model: ValueModel, theta) -> np.ndarray:
    """Validate θ against the model and return it as a float64 vector"""
    values = np.asarray(theta, dtype=np.float64)
    if values.ndim != 1 or values.shape[0] != model.param_dim:
        raise ValueError(
            f"parameter vector must have length {model.param_dim}, got shape {values.shape}"
        )
    if not np.all(np.isfinite(values)):
        raise ValueError("parameter vector contains NaN or Inf")
    return values


def unpack_layers(model: ValueModel, theta: np.ndarray) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Split θ into per-layer (W, b) views following the documented layout"""
    layers = []
    offset = 0
    for (rows, cols), bias in model.param_shapes():
        W = theta[offset:offset + rows * cols].reshape(rows, cols)
        offset += rows * cols
        b = theta[offset:offset + bias]
        offset += bias
        layers.append((W, b))
    return layers


def _mlp_activations(model: ValueModel, theta: np.ndarray,
                     u: np.ndarray) -> Tuple[List[Tuple[np.ndarray, np.ndarray]], List[np.ndarray]]:
    layers = unpack_layers(model, theta)
    activations = [u]
    a = u
    for W, b in layers[:-1]:
        a = np.tanh(a @ W.T + b)
        activations.append(a)
    return layers, activations


def forward(model: ValueModel, theta, inputs) -> np.ndarray:
    """
    Evaluate h(u_i; θ) for every input.

    Args:
        model: Value approximator
        theta: Parameter vector of length model.param_dim
        inputs: N input vectors, shape (N, input_dim)

    Returns:
        Vector of length N
    """
    theta = as_param_vector(model, theta)
    u = _as_inputs(model, inputs)
    if u.shape[0] == 0:
        return np.zeros(0)

    if model.kind == LINEAR:
        return model.features(u) @ theta

    layers, activations = _mlp_activations(model, theta, u)
    W_out, b_out = layers[-1]
    return (activations[-1] @ W_out.T + b_out)[:, 0]


def jacobian(model: ValueModel, theta, inputs) -> np.ndarray:
    """
    Analytic Jacobian of the stacked observation function.

    Args:
        model: Value approximator
        theta: Parameter vector of length model.param_dim
        inputs: N input vectors, shape (N, input_dim)

    Returns:
        d × N matrix whose column i is ∇_θ h(u_i; θ)
    """
    theta = as_param_vector(model, theta)
    u = _as_inputs(model, inputs)
    n = u.shape[0]
    if n == 0:
        return np.zeros((model.param_dim, 0))

    if model.kind == LINEAR:
        return model.features(u).T.copy()

    layers, activations = _mlp_activations(model, theta, u)

    # backward pass, one gradient block per layer, collected output-side first
    blocks = []
    delta = np.ones((n, 1))
    for layer_index in range(len(layers) - 1, -1, -1):
        W, _ = layers[layer_index]
        a_prev = activations[layer_index]
        grad_W = np.einsum('no,ni->noi', delta, a_prev).reshape(n, -1)
        blocks.append(np.hstack([grad_W, delta]))
        if layer_index > 0:
            delta = (delta @ W) * (1.0 - a_prev ** 2)

    return np.hstack(blocks[::-1]).T


def init_params(model: ValueModel, seed: int, scale: float) -> np.ndarray:
    """
    Draw initial parameters i.i.d. uniform in [-scale, scale].

    Deterministic given seed; scale = 0 yields the zero vector.
    """
    if scale < 0:
        raise ValueError(f"scale must be non-negative, got {scale}")
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=model.param_dim) if scale > 0 else np.zeros(model.param_dim)
