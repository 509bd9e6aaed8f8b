"""Dense-network numerics on float64 numpy arrays.

A "matrix" here is simply a 2-D ``np.float64`` array. Layers compute
``z = x @ W.T + b`` followed by an activation; ``forward`` keeps every
intermediate so ``backward`` can apply the chain rule without recomputation.

Randomness comes exclusively from numpy's PCG64 generator
(``np.random.default_rng``), seeded explicitly by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError, StateError

ACTIVATIONS = ("identity", "relu", "mfm")


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = as_matrix(self.weights)
        self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != weight rows {self.weights.shape[0]}"
            )
        if self.activation == "mfm" and self.weights.shape[0] % 2:
            raise ShapeError("mfm layers need an even number of units")

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        n = self.weights.shape[0]
        return n // 2 if self.activation == "mfm" else n

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class Network:
    layers: list[DenseLayer] = field(default_factory=list)

    def __post_init__(self):
        for k in range(1, len(self.layers)):
            prev, cur = self.layers[k - 1], self.layers[k]
            if prev.out_width != cur.in_width:
                raise ShapeError(
                    f"layer {k} expects width {cur.in_width}, previous layer gives {prev.out_width}"
                )

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    def params(self) -> list[np.ndarray]:
        """Flat parameter list ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for layer in self.layers:
            out += [layer.weights, layer.bias]
        return out

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers])


@dataclass
class LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    post: np.ndarray


@dataclass
class ForwardCache:
    network_id: int
    layers: list[LayerCache]


def _activate(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return z
    if activation == "relu":
        return np.maximum(z, 0.0)
    h = z.shape[1] // 2
    # ties go to the first half
    return np.where(z[:, :h] >= z[:, h:], z[:, :h], z[:, h:])


def _activation_backward(z: np.ndarray, g: np.ndarray, activation: str) -> np.ndarray:
    if activation == "identity":
        return g
    if activation == "relu":
        return g * (z > 0.0)
    h = z.shape[1] // 2
    first = z[:, :h] >= z[:, h:]
    return np.concatenate([g * first, g * ~first], axis=1)


def layer_forward(layer: DenseLayer, x: np.ndarray) -> LayerCache:
    if x.shape[1] != layer.in_width:
        raise ShapeError(f"input width {x.shape[1]} != layer input width {layer.in_width}")
    z = x @ layer.weights.T + layer.bias
    return LayerCache(x, z, _activate(z, layer.activation))


def forward(net: Network, x) -> tuple[np.ndarray, ForwardCache]:
    x = as_matrix(x)
    if x.shape[1] != net.in_width:
        raise ShapeError(f"input width {x.shape[1]} != network input width {net.in_width}")
    caches = []
    h = x
    for layer in net.layers:
        c = layer_forward(layer, h)
        caches.append(c)
        h = c.post
    return h, ForwardCache(id(net), caches)


def layer_backward(layer: DenseLayer, cache: LayerCache, grad_output: np.ndarray):
    """Returns ``(dW, db, d_input)`` for one layer."""
    gz = _activation_backward(cache.pre, grad_output, layer.activation)
    dW = gz.T @ cache.inputs
    db = gz.sum(axis=0)
    dx = gz @ layer.weights
    return dW, db, dx


def backward(net: Network, cache: ForwardCache, grad_output) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse-mode pass.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` follows the
    ordering of ``net.params()``.
    """
    if cache.network_id != id(net) or len(cache.layers) != len(net.layers):
        raise StateError("forward cache was produced by a different network")
    g = as_matrix(grad_output)
    if g.shape != cache.layers[-1].post.shape:
        raise ShapeError(
            f"grad_output shape {g.shape} != forward output shape {cache.layers[-1].post.shape}"
        )
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for k in range(len(net.layers) - 1, -1, -1):
        dW, db, g = layer_backward(net.layers[k], cache.layers[k], g)
        grads[2 * k] = dW
        grads[2 * k + 1] = db
    return grads, g


def finite_difference_grad(
    loss_fn: Callable[[], float], params: Sequence[np.ndarray], eps: float = 1e-5
) -> list[np.ndarray]:
    """Central-difference gradient of ``loss_fn`` w.r.t. each array in ``params``.

    The arrays are perturbed in place and restored, so ``loss_fn`` should
    close over them.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(loss_fn())
            flat[i] = orig - eps
            fm = float(loss_fn())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("loss is not finite during finite differencing")
            gflat[i] = (fp - fm) / (2.0 * eps)
        out.append(g)
    return out


def init_params(shape: tuple[int, int], seed, scheme: str = "scaled-uniform") -> np.ndarray:
    """Glorot-style uniform weights in +/- sqrt(6 / (fan_in + fan_out)).

    ``shape`` is ``(fan_out, fan_in)``. ``seed`` may be an int or a sequence
    of ints (fed to ``np.random.SeedSequence``).
    """
    if scheme != "scaled-uniform":
        raise ValueError(f"unknown init scheme {scheme!r}")
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    rng = np.random.default_rng(seed)
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_layer(in_width: int, units: int, activation: str, seed) -> DenseLayer:
    """``units`` is the number of affine outputs (twice the output width for mfm)."""
    return DenseLayer(init_params((units, in_width), seed), np.zeros(units), activation)


def build_network(in_width: int, units: Sequence[int], activations: Sequence[str], seed) -> Network:
    layers = []
    width = in_width
    for k, (n, act) in enumerate(zip(units, activations)):
        layer = init_layer(width, n, act, [*np.atleast_1d(seed).tolist(), k])
        layers.append(layer)
        width = layer.out_width
    return Network(layers)
