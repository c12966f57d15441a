"""A small dense-network toolkit: MLP stacks with hand-written backward passes,
max/mean pooling over points, and Adam.

Tensors are plain 2-D numpy arrays. Stacks run in float32 by default; any
stack can be cloned to float64 for gradient checking.
"""
from __future__ import annotations

import base64
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "tanh", "none")
LEAKY_SLOPE = 0.01


# np.where with a scalar branch is ~20x slower than these maximum() forms
def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0)
    if name == "leaky_relu":
        return np.maximum(z, z.dtype.type(LEAKY_SLOPE) * z)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name, z, out, g):
    if name == "relu":
        return g * (z > 0)
    if name == "leaky_relu":
        return g * np.maximum(z > 0, z.dtype.type(LEAKY_SLOPE))
    if name == "tanh":
        return g * (1 - out * out)
    return g


class MlpStack:
    """Fully connected layers ``x -> act(x W + b)`` applied row-wise.

    Gradients accumulate in ``grads`` across ``backward`` calls until
    ``zero_grad``, so a stack reused several times in one forward pass gets the
    sum of its contributions.
    """

    def __init__(self, widths, activations=None, seed=0, dtype=np.float32, zero_last=False):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"invalid layer widths {widths}")
        n_layers = len(widths) - 1
        if activations is None:
            activations = ["relu"] * (n_layers - 1) + ["none"]
        if isinstance(activations, str):
            activations = [activations] * n_layers
        if len(activations) != n_layers:
            raise ValueError("one activation per layer required")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = widths
        self.activations = list(activations)
        self.dtype = np.dtype(dtype)
        self.weights, self.biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            rng = np.random.default_rng([int(seed), i])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, (fan_in, fan_out))
            if zero_last and i == n_layers - 1:
                w = np.zeros_like(w)
            self.weights.append(w.astype(self.dtype))
            self.biases.append(np.zeros(fan_out, dtype=self.dtype))
        self.zero_grad()
        self._cache = None

    # parameters -----------------------------------------------------------
    def parameters(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def gradients(self) -> list:
        return [g for pair in zip(self.grad_w, self.grad_b) for g in pair]

    def zero_grad(self):
        self.grad_w = [np.zeros_like(w) for w in self.weights]
        self.grad_b = [np.zeros_like(b) for b in self.biases]

    def astype(self, dtype) -> "MlpStack":
        clone = MlpStack.__new__(MlpStack)
        clone.widths = list(self.widths)
        clone.activations = list(self.activations)
        clone.dtype = np.dtype(dtype)
        clone.weights = [w.astype(dtype) for w in self.weights]
        clone.biases = [b.astype(dtype) for b in self.biases]
        clone.zero_grad()
        clone._cache = None
        return clone

    # passes ---------------------------------------------------------------
    def forward(self, x):
        """Return ``(output, cache)``; the cache is also kept for a later ``backward``."""
        h = np.asarray(x, dtype=self.dtype)
        if h.ndim != 2 or h.shape[1] != self.widths[0]:
            raise ValueError(f"expected input with {self.widths[0]} columns, got shape {h.shape}")
        cache = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w + b
            out = _act(act, z)
            cache.append((h, z, out))
            h = out
        self._cache = cache
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, upstream, cache=None, input_grad=True):
        """Accumulate parameter gradients and return the gradient w.r.t. the input.

        With ``input_grad=False`` the final projection through the first weight
        matrix is skipped and the gradient w.r.t. the first pre-activation is
        returned instead; callers needing only a few input columns project it
        themselves.
        """
        cache = cache if cache is not None else self._cache
        if cache is None:
            raise RuntimeError("backward called before forward (no cached activations)")
        g = np.asarray(upstream, dtype=self.dtype)
        if g.shape != cache[-1][2].shape:
            raise ValueError(f"upstream gradient shape {g.shape} != output shape {cache[-1][2].shape}")
        for i in range(len(self.weights) - 1, -1, -1):
            h, z, out = cache[i]
            g = _act_grad(self.activations[i], z, out, g)
            self.grad_w[i] += h.T @ g
            self.grad_b[i] += g.sum(axis=0)
            if i == 0 and not input_grad:
                return g
            g = g @ self.weights[i].T
        return g

    # serialisation ----------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "widths": self.widths,
            "activations": self.activations,
            "dtype": self.dtype.name,
            "weights": [encode_array(w) for w in self.weights],
            "biases": [encode_array(b) for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d) -> "MlpStack":
        stack = cls.__new__(cls)
        stack.widths = list(d["widths"])
        stack.activations = list(d["activations"])
        stack.dtype = np.dtype(d["dtype"])
        stack.weights = [decode_array(w) for w in d["weights"]]
        stack.biases = [decode_array(b) for b in d["biases"]]
        for w, (fi, fo) in zip(stack.weights, zip(stack.widths[:-1], stack.widths[1:])):
            if w.shape != (fi, fo):
                raise ValueError("checkpoint weights disagree with layer widths")
        stack.zero_grad()
        stack._cache = None
        return stack


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a)
    le = a.astype(a.dtype.newbyteorder("<"))
    return {"dtype": a.dtype.name, "shape": list(a.shape),
            "data": base64.b64encode(le.tobytes()).decode("ascii")}


def decode_array(d) -> np.ndarray:
    dt = np.dtype(d["dtype"]).newbyteorder("<")
    raw = np.frombuffer(base64.b64decode(d["data"]), dtype=dt)
    return raw.astype(np.dtype(d["dtype"])).reshape(d["shape"])


# pooling ------------------------------------------------------------------

def pool_max(features):
    """Column-wise max over rows; returns ``(pooled_row, argmax_indices)``."""
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("pooling needs a non-empty (N, C) feature array")
    idx = np.argmax(f, axis=0)  # first maximum on ties
    return f[idx, np.arange(f.shape[1])][None, :], idx


def pool_max_backward(grad_row, idx, n_rows):
    g = np.asarray(grad_row).reshape(-1)
    out = np.zeros((n_rows, g.shape[0]), dtype=g.dtype)
    out[idx, np.arange(g.shape[0])] = g
    return out


def pool_mean(features):
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] == 0:
        raise ValueError("pooling needs a non-empty (N, C) feature array")
    return f.mean(axis=0, keepdims=True), f.shape[0]


def pool_mean_backward(grad_row, n_rows):
    g = np.asarray(grad_row).reshape(1, -1)
    return np.repeat(g / n_rows, n_rows, axis=0)


# Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step, "m": [encode_array(a) for a in self.m],
                "v": [encode_array(a) for a in self.v]}

    @classmethod
    def from_dict(cls, d) -> "AdamState":
        return cls(d["lr"], d["beta1"], d["beta2"], d["eps"], d["step"],
                   [decode_array(a) for a in d["m"]], [decode_array(a) for a in d["v"]])


def adam_step(params, grads, state: AdamState) -> AdamState:
    """In-place bias-corrected Adam update of ``params``."""
    if len(params) != len(grads):
        raise ValueError("parameter and gradient lists differ in length")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("Adam state does not match the parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch in Adam update: {p.shape} vs {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return state
