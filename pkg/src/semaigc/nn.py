"""Minimal dense networks with hand-written backprop, plus SGD/Adam updates."""

from __future__ import annotations

import numpy as np


def _act(name):
    if name == "relu":
        return (lambda x: np.maximum(x, 0.0)), (lambda x, y: (x > 0).astype(x.dtype))
    if name == "tanh":
        return np.tanh, (lambda x, y: 1.0 - y * y)
    if name == "identity":
        return (lambda x: x), (lambda x, y: np.ones_like(x))
    raise ValueError(f"unknown activation {name!r}")


class MLP:
    """Fully connected stack. Row-major batches: ``x`` has shape (n, sizes[0]).

    The activation is applied after every layer except the last, unless
    ``activate_output`` is set.
    """

    def __init__(self, sizes, activation="relu", activate_output=False, rng=None, init="he"):
        rng = np.random.default_rng(rng)
        self.sizes = list(sizes)
        self.activation = activation
        self.activate_output = activate_output
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            scale = np.sqrt(2.0 / fan_in) if init == "he" else np.sqrt(1.0 / fan_in)
            self.params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))
        self._f, self._df = _act(activation)

    @property
    def n_layers(self):
        return len(self.params) // 2

    def forward(self, x):
        cache = []
        h = np.asarray(x, dtype=float)
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            pre = h @ W + b
            last = i == self.n_layers - 1
            out = self._f(pre) if (not last or self.activate_output) else pre
            cache.append((h, pre, out))
            h = out
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dout):
        """Gradients of sum(dout * output) w.r.t. params; also returns d/dx."""
        grads = [None] * len(self.params)
        g = dout
        for i in reversed(range(self.n_layers)):
            h, pre, out = cache[i]
            last = i == self.n_layers - 1
            if not last or self.activate_output:
                g = g * self._df(pre, out)
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads, g

    def copy_params(self):
        return [p.copy() for p in self.params]

    def load_params(self, params):
        if len(params) != len(self.params):
            raise ValueError("parameter count mismatch")
        for dst, src in zip(self.params, params):
            if dst.shape != np.shape(src):
                raise ValueError(f"shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src

    def to_dict(self):
        return {"sizes": self.sizes, "activation": self.activation,
                "activate_output": self.activate_output,
                "params": [p.tolist() for p in self.params]}

    @classmethod
    def from_dict(cls, doc):
        net = cls(doc["sizes"], doc["activation"], doc.get("activate_output", False), rng=0)
        net.load_params([np.asarray(p, dtype=float) for p in doc["params"]])
        return net


class SGD:
    def __init__(self, lr=1e-3):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name, lr):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
