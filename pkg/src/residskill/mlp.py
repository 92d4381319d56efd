"""Float64 multilayer perceptron with hand-written reverse-mode gradients.

Weights are stored as (in, out) matrices so a batch ``x`` of shape (B, in)
maps through ``x @ W + b``.  Hidden layers use ReLU, the last layer is
linear.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


@dataclass
class MLPParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"layer {i} input does not match previous output")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLPParams":
        return MLPParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, last_scale: float = 1.0) -> MLPParams:
    """Uniform(+-1/sqrt(fan_in)) initialisation; ``last_scale`` shrinks the output layer."""
    ws, bs = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = 1.0 / np.sqrt(n_in)
        if i == len(sizes) - 2:
            lim *= last_scale
        ws.append(rng.uniform(-lim, lim, size=(n_in, n_out)))
        bs.append(rng.uniform(-lim, lim, size=n_out))
    return MLPParams(ws, bs)


def forward_cache(p: MLPParams, x: np.ndarray):
    """Forward pass keeping the per-layer inputs for backprop."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != p.weights[0].shape[0]:
        raise ShapeMismatch(f"input width {x.shape[-1]} != {p.weights[0].shape[0]}")
    inputs = []
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h, inputs


def mlp_forward(p: MLPParams, x) -> np.ndarray:
    return forward_cache(p, x)[0]


def backward(p: MLPParams, inputs: list[np.ndarray], dy: np.ndarray, need_params: bool = True,
             need_input: bool = False):
    """Reverse pass.  Returns (grads as [dW0, db0, dW1, ...] or None, d/dx or None).

    ReLU masks are recovered from the cached layer inputs: the input to
    layer i+1 is positive exactly where layer i's pre-activation was.
    """
    grads: list[np.ndarray] = []
    g = dy
    n = len(p.weights)
    for i in range(n - 1, -1, -1):
        h_in = inputs[i]
        if need_params:
            grads.append(g.sum(axis=0) if g.ndim > 1 else g.copy())
            grads.append(np.outer(h_in, g) if g.ndim == 1 else h_in.T @ g)
        if i == 0 and not need_input:
            break
        g = g @ p.weights[i].T
        if i > 0:
            g = g * (h_in > 0)
    dx = g if need_input else None
    if need_params:
        grads.reverse()  # [dW0, db0, ...] after reversing [db_n, dW_n, ...]
        return grads, dx
    return None, dx


def mlp_gradients(p: MLPParams, loss_fn: Callable, batch) -> list[np.ndarray]:
    """Gradient of ``loss_fn(y, batch) -> (loss, dloss/dy)`` w.r.t. every parameter array.

    ``batch`` must provide the network input as ``batch[0]`` (or be the input
    itself).  Returned arrays follow ``MLPParams.arrays()`` order.
    """
    x = batch[0] if isinstance(batch, (tuple, list)) else batch
    y, inputs = forward_cache(p, x)
    _, dy = loss_fn(y, batch)
    grads, _ = backward(p, inputs, np.asarray(dy, dtype=np.float64))
    return grads


class Adam:
    """Adam over a list of arrays, updated in place."""

    def __init__(self, arrays: list[np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.arrays = arrays
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def polyak(target: MLPParams, online: MLPParams, tau: float) -> MLPParams:
    """target <- (1 - tau) * target + tau * online, in place; returns target."""
    if target.sizes != online.sizes:
        raise ShapeMismatch("polyak needs identically shaped networks")
    for t, o in zip(target.arrays(), online.arrays()):
        t *= 1.0 - tau
        t += tau * o
    return target
