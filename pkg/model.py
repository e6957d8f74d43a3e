"""
model.py

The velocity-conditioned recurrent network.

A 3-layer MLP maps each 2-D velocity to an N x N interaction matrix W(v);
the hidden state is updated as g_t = Norm(ReLU(W(v_t) g_{t-1})) from a shared
initial state g0. States therefore live on the non-negative part of the unit
sphere. Two forward paths exist: a differentiable one built on autodiff for
training and a plain numpy one for long evaluation rollouts.
"""

import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple

import numpy as np

import autodiff as ad
from autodiff import Tensor
from errors import DegenerateStateError, ShapeError

logger = logging.getLogger(__name__)

TRAINING_EPS = 1e-8


@dataclass
class ModelParams:
    """
    MLP layers (weight in x out, bias out) and the initial state g0.

    The last layer has N*N outputs, reshaped row-major into W(v).
    g0 is a leaf tensor that only requires gradients when trained.
    """

    layers: List[Tuple[Tensor, Tensor]]
    g0: Tensor

    @property
    def n_units(self) -> int:
        return self.g0.shape[0]

    @property
    def hidden(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def dtype(self):
        return self.g0.dtype

    def trainable(self) -> List[Tensor]:
        """Tensors updated by the optimizer, in a fixed order."""
        tensors = [t for layer in self.layers for t in layer]
        if self.g0.requires_grad:
            tensors.append(self.g0)
        return tensors

    def numpy_layers(self) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [(w.value, b.value) for w, b in self.layers]

    def copy(self) -> "ModelParams":
        layers = [(ad.parameter(w.value, w.name), ad.parameter(b.value, b.name)) for w, b in self.layers]
        g0 = Tensor(self.g0.value.copy(), requires_grad=self.g0.requires_grad, name="g0")
        return ModelParams(layers, g0)

    def astype(self, dtype) -> "ModelParams":
        layers = [
            (ad.parameter(w.value, w.name, dtype=dtype), ad.parameter(b.value, b.name, dtype=dtype))
            for w, b in self.layers
        ]
        g0 = Tensor(self.g0.value.astype(dtype), requires_grad=self.g0.requires_grad, name="g0")
        return ModelParams(layers, g0)


def initial_state(n_units: int, dtype=np.float64) -> np.ndarray:
    """The normalised all-ones vector: non-negative with unit norm."""
    return np.full(n_units, 1.0 / np.sqrt(n_units), dtype=dtype)


def init_params(
    n_units: int = 128,
    hidden: int = 256,
    rng: Optional[np.random.Generator] = None,
    n_layers: int = 3,
    dtype=np.float64,
    train_g0: bool = False,
) -> ModelParams:
    """
    Fan-in scaled uniform initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).

    Args:
        n_units: Number of recurrent units N
        hidden: MLP hidden width H
        rng: Seeded numpy generator
        n_layers: Number of MLP layers (2 -> H -> ... -> N^2)
        dtype: float64 or float32
        train_g0: Whether g0 receives gradients

    Returns:
        Fresh ModelParams
    """
    if n_layers < 1:
        raise ValueError(f"need at least one MLP layer, got {n_layers}")
    rng = rng if rng is not None else np.random.default_rng()
    sizes = [2] + [hidden] * (n_layers - 1) + [n_units * n_units]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)
        b = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        layers.append((ad.parameter(w, f"w{i}"), ad.parameter(b, f"b{i}")))
    g0 = Tensor(initial_state(n_units, dtype), requires_grad=train_g0, name="g0")
    return ModelParams(layers, g0)


# ---------------------------------------------------------------------------
# Differentiable forward
# ---------------------------------------------------------------------------

def mlp(params: ModelParams, inputs: Tensor) -> Tensor:
    """K x 2 velocities -> K x N^2; ReLU between layers, linear output."""
    h = inputs
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
    return h


def interaction_matrices(params: ModelParams, velocities: np.ndarray) -> Tensor:
    """W(v) for every row of a K x 2 velocity array, as a K x N x N tensor."""
    velocities = np.asarray(velocities)
    if velocities.ndim != 2 or velocities.shape[1] != 2:
        raise ShapeError(f"velocities must be K x 2, got {velocities.shape}")
    n = params.n_units
    out = mlp(params, ad.constant(velocities, params.g0))
    return ad.reshape(out, (velocities.shape[0], n, n))


def interaction_matrix(params: ModelParams, v) -> Tensor:
    """W(v) for a single velocity, N x N."""
    n = params.n_units
    return ad.reshape(interaction_matrices(params, np.reshape(v, (1, 2))), (n, n))


def norm_relu(x: Tensor, eps: float = 0.0) -> Tensor:
    """
    ReLU(x) / ||ReLU(x)|| along the last axis.

    With eps == 0 an input without positive entries raises
    DegenerateStateError; training passes eps > 0, which is added to the norm.
    """
    r = ad.relu(x)
    norm = ad.l2norm(r, axis=-1, keepdims=True)
    if eps > 0:
        norm = ad.add(norm, eps)
    elif np.any(norm.value == 0):
        raise DegenerateStateError("Norm-ReLU input has no positive component")
    return ad.divide(r, norm)


@dataclass
class BatchStates:
    """Differentiable states for a batch of trajectories."""

    states: Tensor
    initial: Tensor

    def with_initial(self) -> Tensor:
        """B x (T + 1) x N, g0 first."""
        b, n = self.initial.shape
        return ad.concat([ad.reshape(self.initial, (b, 1, n)), self.states], axis=1)


@dataclass
class StateSequence:
    """The T x N states of one trajectory (g0 not included)."""

    tensor: Tensor

    @property
    def states(self) -> np.ndarray:
        return self.tensor.value

    def __len__(self) -> int:
        return self.tensor.shape[0]


def unroll_batch(params: ModelParams, table: np.ndarray, index: np.ndarray, eps: float = 0.0) -> BatchStates:
    """
    Run B trajectories whose step t uses velocity table[index[b, t]].

    W is evaluated once per distinct velocity in the table.

    Args:
        params: Model parameters
        table: K x 2 velocity table
        index: B x T integer indices into the table
        eps: Norm-ReLU denominator offset (0 raises on degenerate states)

    Returns:
        BatchStates with states of shape B x T x N
    """
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2:
        raise ShapeError(f"index must be B x T, got {index.shape}")
    batch, steps = index.shape
    n = params.n_units
    if params.g0.requires_grad:
        g = ad.add(ad.constant(np.zeros((batch, n)), params.g0), params.g0)
    else:
        g = ad.constant(np.tile(params.g0.value, (batch, 1)), params.g0)
    initial = g
    if steps == 0:
        return BatchStates(ad.constant(np.zeros((batch, 0, n)), params.g0), initial)

    distinct, inverse = np.unique(np.asarray(table), axis=0, return_inverse=True)
    remapped = inverse.reshape(-1)[index]
    matrices = interaction_matrices(params, distinct)

    states = []
    for t in range(steps):
        w_t = ad.take(matrices, remapped[:, t])
        h = ad.reshape(ad.matmul(w_t, ad.reshape(g, (batch, n, 1))), (batch, n))
        try:
            g = norm_relu(h, eps)
        except DegenerateStateError as e:
            raise DegenerateStateError(f"degenerate state at step {t}: {e}", step=t) from e
        states.append(g)
    return BatchStates(ad.stack(states, axis=1), initial)


def unroll(params: ModelParams, velocities: np.ndarray, training: bool = False) -> StateSequence:
    """
    Differentiable unroll of a single T x 2 velocity sequence.

    Outside training a degenerate Norm-ReLU input raises with the step index.
    """
    velocities = np.asarray(velocities, dtype=np.float64).reshape(-1, 2)
    index = np.arange(velocities.shape[0])[None, :]
    result = unroll_batch(params, velocities, index, TRAINING_EPS if training else 0.0)
    steps = velocities.shape[0]
    return StateSequence(ad.reshape(result.states, (steps, params.n_units)))


# ---------------------------------------------------------------------------
# Numpy forward for evaluation
# ---------------------------------------------------------------------------

def mlp_numpy(layers: List[Tuple[np.ndarray, np.ndarray]], inputs: np.ndarray) -> np.ndarray:
    h = inputs
    for i, (w, b) in enumerate(layers):
        h = h @ w + b
        if i < len(layers) - 1:
            h = np.maximum(h, 0)
    return h


def interaction_matrices_numpy(params: ModelParams, velocities: np.ndarray) -> np.ndarray:
    n = params.n_units
    out = mlp_numpy(params.numpy_layers(), np.asarray(velocities, dtype=params.dtype))
    return out.reshape(-1, n, n)


def norm_relu_numpy(x: np.ndarray, step: Optional[int] = None) -> np.ndarray:
    r = np.maximum(x, 0)
    norm = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(norm == 0):
        where = f" at step {step}" if step is not None else ""
        raise DegenerateStateError(f"Norm-ReLU input has no positive component{where}", step=step)
    return r / norm


def rollout_chunks(
    params: ModelParams,
    velocities: np.ndarray,
    g: Optional[np.ndarray] = None,
    chunk: int = 256,
) -> Iterator[np.ndarray]:
    """
    Evaluation-mode rollout over a long velocity sequence, chunk by chunk.

    Yields consecutive blocks of states (chunk x N); the hidden state carries
    across blocks. Degenerate states raise with the absolute step index.
    """
    g = params.g0.value.copy() if g is None else np.asarray(g, dtype=params.dtype)
    velocities = np.asarray(velocities)
    for start in range(0, velocities.shape[0], chunk):
        matrices = interaction_matrices_numpy(params, velocities[start:start + chunk])
        block = np.empty((matrices.shape[0], params.n_units), dtype=params.dtype)
        for i, w in enumerate(matrices):
            g = norm_relu_numpy(w @ g, step=start + i)
            block[i] = g
        yield block


def rollout(params: ModelParams, velocities: np.ndarray, g: Optional[np.ndarray] = None) -> np.ndarray:
    """All T x N evaluation-mode states for a velocity sequence."""
    blocks = list(rollout_chunks(params, velocities, g))
    if not blocks:
        return np.zeros((0, params.n_units), dtype=params.dtype)
    return np.concatenate(blocks, axis=0)


def step_numpy(params: ModelParams, g: np.ndarray, v) -> np.ndarray:
    """One evaluation-mode update of states g (... x N) under a single velocity v."""
    w = interaction_matrices_numpy(params, np.reshape(v, (1, 2)))[0]
    return norm_relu_numpy(np.asarray(g) @ w.T)
