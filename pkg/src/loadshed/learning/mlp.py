"""Small fully connected networks in numpy: forward pass, backprop, gradient check.

Hidden layers use ``relu``, ``tanh`` or ``linear``; the output layer is
affine.  Parameters are kept as a list of ``(W, b)`` pairs with ``W`` of
shape ``(n_out, n_in)`` so that a layer computes ``z = act(W @ x + b)``;
batches are processed row-wise as ``X @ W.T + b``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "tanh", "linear")


def _act(name: str, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    return a


def _act_grad(name: str, a: np.ndarray, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (a > 0).astype(float)
    if name == "tanh":
        return 1.0 - z * z
    return np.ones_like(a)


@dataclass
class MLP:
    sizes: tuple[int, ...]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.sizes) < 2:
            raise ValueError("need at least an input and an output layer")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.sizes[k + 1], self.sizes[k]) or b.shape != (self.sizes[k + 1],):
                raise ValueError(f"layer {k} has shape {W.shape}/{b.shape}, "
                                 f"expected ({self.sizes[k + 1]}, {self.sizes[k]})")

    @classmethod
    def init(cls, sizes: Sequence[int], activation: str = "relu", rng=None) -> "MLP":
        """He (relu) or Glorot (tanh, linear) normal initialisation, zero biases."""
        rng = np.random.default_rng(rng)
        sizes = tuple(int(s) for s in sizes)
        Ws, bs = [], []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / n_in) if activation == "relu" else np.sqrt(2.0 / (n_in + n_out))
            Ws.append(rng.normal(0.0, scale, (n_out, n_in)))
            bs.append(np.zeros(n_out))
        return cls(sizes, activation, Ws, bs)

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in
                               zip(self.weights, self.biases)])

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[k] = theta[pos:pos + W.size].reshape(W.shape).copy()
            pos += W.size
            self.biases[k] = theta[pos:pos + b.size].copy()
            pos += b.size

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.activation, [W.copy() for W in self.weights],
                   [b.copy() for b in self.biases])

    def forward(self, X: np.ndarray, keep: bool = False):
        """Output of shape ``(n, sizes[-1])``; with ``keep`` also the pre/post activations."""
        z = np.asarray(X, dtype=float)
        cache = [(None, z)]
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = z @ W.T + b
            z = a if k == last else _act(self.activation, a)
            cache.append((a, z))
        return (z, cache) if keep else z

    def backward(self, cache, d_out: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Gradients of ``sum(d_out * output)`` with respect to every weight and bias."""
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        delta = d_out
        for k in range(len(self.weights) - 1, -1, -1):
            z_prev = cache[k][1]
            gW[k] = delta.T @ z_prev
            gb[k] = delta.sum(axis=0)
            if k > 0:
                a, z = cache[k]
                delta = (delta @ self.weights[k]) * _act_grad(self.activation, a, z)
        return gW, gb

    def flat_grad(self, gW, gb) -> np.ndarray:
        return np.concatenate([np.concatenate([g.ravel(), h]) for g, h in zip(gW, gb)])


def mse_loss(model: MLP, X, y, weight_decay: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean squared error plus ``weight_decay * sum(W**2)``; returns (loss, flat gradient).

    Biases are not decayed.
    """
    y = np.asarray(y, dtype=float).reshape(len(X), -1)
    out, cache = model.forward(X, keep=True)
    r = out - y
    n = len(X)
    loss = float(np.sum(r * r) / n)
    gW, gb = model.backward(cache, 2.0 * r / n)
    if weight_decay:
        loss += weight_decay * sum(float(np.sum(W * W)) for W in model.weights)
        gW = [g + 2.0 * weight_decay * W for g, W in zip(gW, model.weights)]
    return loss, model.flat_grad(gW, gb)


def softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loss(model: MLP, X, labels, weight_decay: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over integer class labels plus weight decay."""
    labels = np.asarray(labels, dtype=int)
    logits, cache = model.forward(X, keep=True)
    p = softmax(logits)
    n = len(X)
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300))))
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    gW, gb = model.backward(cache, d / n)
    if weight_decay:
        loss += weight_decay * sum(float(np.sum(W * W)) for W in model.weights)
        gW = [g + 2.0 * weight_decay * W for g, W in zip(gW, model.weights)]
    return loss, model.flat_grad(gW, gb)


def gradient_check(model: MLP, X, y, h: float = 1e-5, weight_decay: float = 0.0,
                   loss=mse_loss) -> float:
    """Max relative difference between backprop and central finite differences.

    The relative error of each entry is ``|g - g_fd| / max(|g|, |g_fd|, 1e-8)``.
    For ``relu`` networks, inputs should be kept away from activation kinks,
    where the loss is not differentiable.
    """
    m = model.copy()
    theta = m.flat()
    _, g = loss(m, X, y, weight_decay)
    g_fd = np.empty_like(theta)
    for p in range(theta.size):
        t = theta.copy()
        t[p] += h
        m.set_flat(t)
        up, _ = loss(m, X, y, weight_decay)
        t[p] -= 2 * h
        m.set_flat(t)
        down, _ = loss(m, X, y, weight_decay)
        g_fd[p] = (up - down) / (2 * h)
    m.set_flat(theta)
    denom = np.maximum(np.maximum(np.abs(g), np.abs(g_fd)), 1e-8)
    return float(np.max(np.abs(g - g_fd) / denom))


def jitter_off_kinks(model: MLP, X: np.ndarray, margin: float = 1e-3, rng=None,
                     max_rounds: int = 100) -> np.ndarray:
    """Perturb rows of ``X`` until no hidden pre-activation lies within ``margin`` of 0."""
    rng = np.random.default_rng(rng)
    X = np.array(X, dtype=float)
    for _ in range(max_rounds):
        _, cache = model.forward(X, keep=True)
        near = np.zeros(len(X), bool)
        for a, _ in cache[1:-1]:
            near |= np.any(np.abs(a) < margin, axis=1)
        if not near.any():
            return X
        X[near] += rng.normal(0.0, 10 * margin, (int(near.sum()), X.shape[1]))
    raise RuntimeError("could not move inputs away from relu kinks")
