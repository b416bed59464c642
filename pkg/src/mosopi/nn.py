"""Minimal feed-forward nets with reverse-mode gradients and Adam.

Parameters live in plain float64 numpy arrays so that runs are bitwise
reproducible for a fixed seed.  forward() caches layer inputs and
pre-activations; backward() consumes the cache and returns one gradient
array per parameter array, in the same order as Mlp.params.
"""

from __future__ import annotations

import numpy as np


def _tanh(z):
    return np.tanh(z)


def _tanh_grad(z, a):
    return 1.0 - a * a


def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, a):
    return (z > 0.0).astype(z.dtype)


def _linear(z):
    return z


def _linear_grad(z, a):
    return np.ones_like(z)


ACTIVATIONS = {
    "tanh": (_tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "linear": (_linear, _linear_grad),
}


class Mlp:
    """Fully connected layers; widths = [in, h1, ..., out].

    One activation name per layer.  Weights start uniform in
    +-sqrt(6 / (fan_in + fan_out)), biases at zero.
    """

    def __init__(self, widths, activations, rng=0):
        if len(widths) < 2:
            raise ValueError("need at least an input and an output width")
        if len(activations) != len(widths) - 1:
            raise ValueError(
                f"{len(widths) - 1} layers but {len(activations)} activations"
            )
        for name in activations:
            if name not in ACTIVATIONS:
                raise ValueError(f"unknown activation {name!r}")
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        self.widths = [int(w) for w in widths]
        self.activations = list(activations)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self._cache = None

    @property
    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params)

    def forward(self, x):
        """Evaluate the net on a vector (d,) or a batch (n, d)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        a = x[None, :] if single else x
        if a.shape[1] != self.widths[0]:
            raise ValueError(f"input width {a.shape[1]} != {self.widths[0]}")
        inputs, preacts, outputs = [], [], []
        for w, b, name in zip(self.weights, self.biases, self.activations):
            inputs.append(a)
            z = a @ w + b
            a = ACTIVATIONS[name][0](z)
            preacts.append(z)
            outputs.append(a)
        self._cache = (inputs, preacts, outputs, single)
        return a[0] if single else a

    def backward(self, grad_out):
        """Gradients of sum(grad_out * output) w.r.t. every parameter."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        inputs, preacts, outputs, single = self._cache
        g = np.asarray(grad_out, dtype=np.float64)
        if single and g.ndim == 1:
            g = g[None, :]
        if g.shape != outputs[-1].shape:
            raise ValueError(
                f"grad_out shape {g.shape} != output shape {outputs[-1].shape}"
            )
        grads = [None] * (2 * len(self.weights))
        for l in range(len(self.weights) - 1, -1, -1):
            act_grad = ACTIVATIONS[self.activations[l]][1]
            gz = g * act_grad(preacts[l], outputs[l])
            grads[2 * l] = inputs[l].T @ gz
            grads[2 * l + 1] = gz.sum(axis=0)
            if l > 0:
                g = gz @ self.weights[l].T
        return grads

    def copy(self):
        other = Mlp.__new__(Mlp)
        other.widths = list(self.widths)
        other.activations = list(self.activations)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._cache = None
        return other

    def copy_from(self, other):
        """Whole-array assignment from another net of identical layout."""
        if other.widths != self.widths or other.activations != self.activations:
            raise ValueError("layout mismatch in copy_from")
        for mine, theirs in zip(self.weights, other.weights):
            mine[...] = theirs
        for mine, theirs in zip(self.biases, other.biases):
            mine[...] = theirs

    def save(self, path):
        np.savez(path, **mlp_payload(self))

    @classmethod
    def load(cls, path):
        with np.load(path, allow_pickle=False) as data:
            return mlp_from_payload(data)


def mlp_payload(net: Mlp, prefix: str = "") -> dict:
    """Flat dict of arrays describing a net; shape header plus parameters."""
    payload = {
        prefix + "widths": np.array(net.widths, dtype=np.int64),
        prefix + "activations": np.array(net.activations),
    }
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        payload[f"{prefix}w{i}"] = w
        payload[f"{prefix}b{i}"] = b
    return payload


def mlp_from_payload(data, prefix: str = "") -> Mlp:
    widths = [int(w) for w in data[prefix + "widths"]]
    activations = [str(a) for a in data[prefix + "activations"]]
    net = Mlp(widths, activations, rng=0)
    for i in range(len(net.weights)):
        w, b = data[f"{prefix}w{i}"], data[f"{prefix}b{i}"]
        if w.shape != net.weights[i].shape or b.shape != net.biases[i].shape:
            raise ValueError(f"checkpoint layer {i} shape mismatch")
        net.weights[i][...] = w
        net.biases[i][...] = b
    return net


def clip_gradients(grads, max_norm):
    """Rescale the whole gradient list so its global L2 norm is <= max_norm.

    Mutates the arrays in place and returns (grads, norm_before_clipping).
    """
    if max_norm is not None and max_norm <= 0.0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is not None and total > max_norm and total > 0.0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return grads, total


class Adam:
    """Adam with bias correction; moments mirror the parameter list."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0.0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads):
        if len(params) != len(self.m) or len(grads) != len(self.m):
            raise ValueError("parameter/gradient list length mismatch")
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient in Adam step")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
