"""Minimal numpy multilayer perceptrons with explicit gradients.

Float64 everywhere, deterministic given the rng. Parameters travel either as
a list of (W, b) pairs or flattened into a single vector (the natural-gradient
code and the checkpoint format use the flat form; layout is W1 row-major, b1,
W2, b2, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _softsign(x):
    return x / (1.0 + np.abs(x))


def _softsign_deriv_from_x(x):
    d = 1.0 + np.abs(x)
    return 1.0 / (d * d)


ACTIVATIONS = {
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "softsign": (_softsign, _softsign_deriv_from_x),
}


def init_params(rng: np.random.Generator, sizes: tuple[int, ...],
                scale_last: float = 1.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Xavier-scaled Gaussian weights, zero biases; the last layer can be
    shrunk (small initial outputs keep an untrained policy near its nominal
    posture)."""
    params = []
    for i in range(len(sizes) - 1):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), (fan_in, fan_out))
        if i == len(sizes) - 2:
            w *= scale_last
        params.append((w, np.zeros(fan_out)))
    return params


def param_count(sizes: tuple[int, ...]) -> int:
    return sum(sizes[i] * sizes[i + 1] + sizes[i + 1] for i in range(len(sizes) - 1))


def flatten(params) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in params])


def unflatten(vec: np.ndarray, sizes: tuple[int, ...]):
    params = []
    k = 0
    for i in range(len(sizes) - 1):
        n_in, n_out = sizes[i], sizes[i + 1]
        w = vec[k:k + n_in * n_out].reshape(n_in, n_out)
        k += n_in * n_out
        b = vec[k:k + n_out]
        k += n_out
        params.append((w, b))
    return params


def forward(params, x: np.ndarray, activation: str = "tanh") -> np.ndarray:
    """Hidden layers use the named activation; the output layer is linear."""
    act, _ = ACTIVATIONS[activation]
    h = x
    for i, (w, b) in enumerate(params):
        h = h @ w + b
        if i < len(params) - 1:
            h = act(h)
    return h


def forward_cache(params, x: np.ndarray, activation: str = "tanh"):
    """Forward pass keeping pre-activations for backprop."""
    act, _ = ACTIVATIONS[activation]
    h = x
    inputs = []
    preacts = []
    for i, (w, b) in enumerate(params):
        inputs.append(h)
        z = h @ w + b
        if i < len(params) - 1:
            preacts.append(z)
            h = act(z)
        else:
            h = z
    return h, (inputs, preacts)


def backward(params, cache, dy: np.ndarray, activation: str = "tanh"):
    """Gradients of sum(dy * output) w.r.t. params and input."""
    _, dact = ACTIVATIONS[activation]
    inputs, preacts = cache
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)  # type: ignore
    g = dy
    for i in range(len(params) - 1, -1, -1):
        w, _ = params[i]
        grads[i] = (inputs[i].T @ g, g.sum(axis=0))
        g = g @ w.T
        if i > 0:
            g = g * dact(preacts[i - 1])
    return grads, g


def jvp(params, x: np.ndarray, dparams, activation: str = "tanh") -> np.ndarray:
    """Directional derivative of the output along dparams (x held fixed)."""
    act, dact = ACTIVATIONS[activation]
    h = x
    dh = np.zeros_like(x)
    for i, ((w, b), (dw, db)) in enumerate(zip(params, dparams)):
        z = h @ w + b
        dz = dh @ w + h @ dw + db
        if i < len(params) - 1:
            h = act(z)
            dh = dz * dact(z)
        else:
            h, dh = z, dz
    return dh


@dataclass
class Adam:
    """Adam over a flat parameter vector."""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None)  # type: ignore
    v: np.ndarray = field(default=None)  # type: ignore
    t: int = 0

    def step(self, vec: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(vec)
            self.v = np.zeros_like(vec)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mh = self.m / (1.0 - self.beta1 ** self.t)
        vh = self.v / (1.0 - self.beta2 ** self.t)
        return vec - self.lr * mh / (np.sqrt(vh) + self.eps)
