"""Fully connected ReLU network with softmax cross-entropy, flat parameter vector.

Layout of the parameter vector: for each layer, the ``(in, out)`` weight
matrix in row-major order followed by the ``out`` biases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..rng import RandomStream


@dataclass(frozen=True)
class MlpArchitecture:
    sizes: tuple[int, ...] = (784, 32, 10)

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) < 1 for s in self.sizes):
            raise ValueError(f"invalid layer sizes {self.sizes}")

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum(a * b + b for a, b in self.shapes)


@dataclass
class GlobalModel:
    weights: np.ndarray
    arch: MlpArchitecture

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.arch.param_count,):
            raise ValueError("parameter vector does not match the architecture")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("model parameters must be finite")


def unpack(w: np.ndarray, arch: MlpArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    layers, pos = [], 0
    for a, b in arch.shapes:
        mat = w[pos : pos + a * b].reshape(a, b)
        pos += a * b
        layers.append((mat, w[pos : pos + b]))
        pos += b
    return layers


def init_params(arch: MlpArchitecture, stream: RandomStream) -> np.ndarray:
    """He-uniform weights, zero biases."""
    parts = []
    for a, b in arch.shapes:
        limit = math.sqrt(6.0 / a)
        parts.append((2.0 * stream.uniform(a * b) - 1.0) * limit)
        parts.append(np.zeros(b))
    return np.concatenate(parts)


def forward(w: np.ndarray, arch: MlpArchitecture, x: np.ndarray) -> np.ndarray:
    h = np.atleast_2d(x)
    layers = unpack(w, arch)
    for i, (mat, bias) in enumerate(layers):
        h = h @ mat + bias
        if i < len(layers) - 1:
            h = np.maximum(h, 0.0)
    return h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss_and_grad(w: np.ndarray, arch: MlpArchitecture, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient with respect to ``w``."""
    x = np.atleast_2d(x)
    y = np.atleast_1d(y)
    layers = unpack(w, arch)
    acts = [x]
    pre = []
    h = x
    for i, (mat, bias) in enumerate(layers):
        z = h @ mat + bias
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
        acts.append(h)
    logp = _log_softmax(acts[-1])
    batch = x.shape[0]
    loss = -float(logp[np.arange(batch), y].mean())
    delta = np.exp(logp)
    delta[np.arange(batch), y] -= 1.0
    delta /= batch
    grads = []
    for i in range(len(layers) - 1, -1, -1):
        mat, _ = layers[i]
        grads.append((acts[i].T @ delta, delta.sum(axis=0)))
        if i:
            delta = (delta @ mat.T) * (pre[i - 1] > 0)
    flat = []
    for gm, gb in reversed(grads):
        flat.append(gm.ravel())
        flat.append(gb)
    return loss, np.concatenate(flat)


def accuracy(w: np.ndarray, arch: MlpArchitecture, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(np.argmax(forward(w, arch, x), axis=1) == y))
