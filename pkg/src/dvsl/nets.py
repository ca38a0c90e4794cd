"""Tiny numpy MLP with hand-written backprop."""

from __future__ import annotations

import numpy as np


class MLP:
    """tanh hidden layers, linear output. Parameters live in ``self.params``
    as [W0, b0, W1, b1, ...] with W of shape (fan_in, fan_out)."""

    def __init__(self, sizes, rng: np.random.Generator, zero_last: bool = False, last_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.params: list[np.ndarray] = []
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            last = k == len(self.sizes) - 2
            if last and zero_last:
                W = np.zeros((a, b))
            else:
                W = rng.normal(0.0, 1.0, size=(a, b)) / np.sqrt(a) * (last_scale if last else 1.0)
            self.params += [W, np.zeros(b)]

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x: np.ndarray):
        """Returns (output, cache). ``x`` is (batch, in)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input width {x.shape[1]} != {self.sizes[0]}")
        acts = [x]
        h = x
        for k in range(self.n_layers):
            W, b = self.params[2 * k], self.params[2 * k + 1]
            h = h @ W + b
            if k < self.n_layers - 1:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, d_out: np.ndarray):
        """Gradients of sum(d_out * output) w.r.t. params and the input."""
        grads = [None] * len(self.params)
        g = np.asarray(d_out, dtype=float)
        for k in reversed(range(self.n_layers)):
            if k < self.n_layers - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
        return grads, g

    def n_params(self) -> int:
        return sum(p.size for p in self.params)
