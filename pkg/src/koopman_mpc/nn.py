"""Small dense networks with hand-written backprop, plus Adam.

Data are stored column-wise: a batch of ``N`` samples of dimension ``d`` is a
``(d, N)`` array, matching the snapshot-matrix convention of the Koopman code.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity", "tanh")


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"


class DenseNet:
    """Feed-forward stack ``x -> act(W x + b)`` for each layer."""

    def __init__(self, layers: Sequence[Layer]):
        self.layers: List[Layer] = list(layers)
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.W.shape[0] != nxt.W.shape[1]:
                raise ValueError("layer dimensions do not chain")
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @classmethod
    def build(cls, sizes: Sequence[int], rng: np.random.Generator, hidden="relu", output="identity"):
        """Glorot-uniform weights, zero biases."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (n_in + n_out))
            W = rng.uniform(-limit, limit, size=(n_out, n_in))
            act = output if i == len(sizes) - 2 else hidden
            layers.append(Layer(W, np.zeros(n_out), act))
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def out_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    def params(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def weights(self) -> List[np.ndarray]:
        return [layer.W for layer in self.layers]

    def copy(self) -> "DenseNet":
        return DenseNet([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def forward(self, x: np.ndarray):
        """Return the output and a cache for :meth:`backward`."""
        squeeze = x.ndim == 1
        h = x[:, None] if squeeze else x
        cache = []
        for layer in self.layers:
            pre = layer.W @ h + layer.b[:, None]
            out = _activate(pre, layer.activation)
            cache.append((h, pre, out))
            h = out
        return (h[:, 0] if squeeze else h), cache

    def backward(self, cache, grad_out: np.ndarray):
        """Backpropagate ``grad_out``; return (param grads, input grad).

        Param grads follow the ordering of :meth:`params`.
        """
        g = grad_out[:, None] if grad_out.ndim == 1 else grad_out
        grads = [None] * (2 * len(self.layers))
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            h_in, pre, out = cache[i]
            g = g * _activate_grad(pre, out, layer.activation)
            grads[2 * i] = g @ h_in.T
            grads[2 * i + 1] = g.sum(axis=1)
            g = layer.W.T @ g
        return grads, (g[:, 0] if grad_out.ndim == 1 else g)


def _activate(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "tanh":
        return np.tanh(x)
    return x


def _activate_grad(pre, out, kind):
    if kind == "relu":
        return (pre > 0).astype(pre.dtype)
    if kind == "tanh":
        return 1.0 - out * out
    return np.ones_like(pre)


class Adam:
    """Adam updating a fixed list of arrays in place."""

    def __init__(self, params: Sequence[np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-7):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def net_to_dict(net: DenseNet) -> list:
    return [
        {
            "activation": l.activation,
            "W": {"shape": list(l.W.shape), "data": [float(v) for v in l.W.ravel()]},
            "b": {"shape": list(l.b.shape), "data": [float(v) for v in l.b.ravel()]},
        }
        for l in net.layers
    ]


def net_from_dict(items: list) -> DenseNet:
    return DenseNet([
        Layer(array_from_dict(d["W"]), array_from_dict(d["b"]), d["activation"]) for d in items
    ])


def array_to_dict(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def array_from_dict(d: dict) -> np.ndarray:
    return np.array(d["data"], dtype=float).reshape(d["shape"])
