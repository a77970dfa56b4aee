"""Small fully connected decoder with hand-written forward and backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HIDDEN_WIDTHS = (128, 64)
OUTPUT_DIM = 12

_ACTIVATIONS = ("relu", "identity")


@dataclass
class MlpParams:
    """Weights stored as ``(fan_in, fan_out)`` so a layer is ``x @ W + b``."""

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        for w, b, w_next in zip(self.weights, self.biases, self.weights[1:] + [None]):
            if b.shape != (w.shape[1],):
                raise ValueError("bias shape does not match layer width")
            if w_next is not None and w_next.shape[0] != w.shape[1]:
                raise ValueError("consecutive layer sizes do not chain")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @classmethod
    def create(
        cls,
        input_dim: int,
        rng: np.random.Generator,
        hidden=HIDDEN_WIDTHS,
        output_dim: int = OUTPUT_DIM,
        activation: str = "relu",
        zero_last: bool = True,
    ) -> "MlpParams":
        """Kaiming-uniform hidden layers; the output layer is zero when ``zero_last``."""
        sizes = [input_dim, *hidden, output_dim]
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            if last and zero_last:
                weights.append(np.zeros((fan_in, fan_out)))
                biases.append(np.zeros(fan_out))
                continue
            bound = np.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            bb = 1.0 / np.sqrt(fan_in)
            biases.append(rng.uniform(-bb, bb, size=fan_out))
        return cls(weights, biases, activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)


@dataclass
class MlpCache:
    inputs: list  # input to each layer
    preacts: list  # pre-activation of each hidden layer


def mlp_forward(params: MlpParams, x) -> tuple[np.ndarray, MlpCache]:
    """Evaluate the network on ``(N, in)`` or ``(in,)`` inputs."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.input_dim:
        raise ValueError(f"input width {h.shape[1]} does not match network input {params.input_dim}")
    cache = MlpCache([], [])
    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        if i < n_layers - 1:
            cache.preacts.append(z)
            h = np.maximum(z, 0.0) if params.activation == "relu" else z
        else:
            h = z
    return (h[0] if single else h), cache


def mlp_backward(params: MlpParams, cache: MlpCache, upstream) -> tuple[list, list, np.ndarray]:
    """Reverse-mode gradients for a cached forward pass.

    Returns:
        ``(weight_grads, bias_grads, input_grad)``; gradients are summed over
        the batch.
    """
    g = np.asarray(upstream, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None, :]
    n_layers = len(params.weights)
    w_grads = [None] * n_layers
    b_grads = [None] * n_layers
    for i in range(n_layers - 1, -1, -1):
        w_grads[i] = cache.inputs[i].T @ g
        b_grads[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
        if i > 0 and params.activation == "relu":
            g = g * (cache.preacts[i - 1] > 0)
    return w_grads, b_grads, (g[0] if single else g)
