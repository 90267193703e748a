"""Minimal dense network with GeLU activations, trained by momentum SGD.

Kept dependency-free (numpy only) so that weights serialize exactly and
input gradients are available in closed form for the constraint machinery.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

SQRT2 = np.sqrt(2.0)
INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    phi = np.exp(-0.5 * x * x) * INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * phi


@dataclass
class Mlp:
    weights: list = field(default_factory=list)  # layer l: (dims[l+1], dims[l])
    biases: list = field(default_factory=list)

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @classmethod
    def init(cls, dims, rng: np.random.Generator) -> "Mlp":
        weights, biases = [], []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / d_in)
            weights.append(rng.normal(0.0, scale, size=(d_out, d_in)))
            biases.append(np.zeros(d_out))
        return cls(weights=weights, biases=biases)

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits for a (batch, d_in) input; optionally keep the caches."""
        h = np.atleast_2d(np.asarray(x, dtype=float))
        pre_acts, acts = [], [h]
        last = len(self.weights) - 1
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ W.T + b
            if l < last:
                pre_acts.append(z)
                h = gelu(z)
                acts.append(h)
            else:
                h = z
        if keep:
            return h, (pre_acts, acts)
        return h

    def input_gradient(self, x: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
        """d(out_grad . logits)/dx, exact reverse mode, batched."""
        x2 = np.atleast_2d(np.asarray(x, dtype=float))
        _, (pre_acts, _) = self.forward(x2, keep=True)
        g = np.broadcast_to(np.asarray(out_grad, dtype=float), (x2.shape[0], self.weights[-1].shape[0]))
        g = g @ self.weights[-1]
        for l in range(len(self.weights) - 2, -1, -1):
            g = g * gelu_grad(pre_acts[l])
            g = g @ self.weights[l]
        return g.reshape(np.shape(x)[:-1] + (x2.shape[1],)) if np.ndim(x) > 1 else g[0]

    def loss_and_grads(self, x, y, class_weights=None):
        """Mean weighted cross entropy and parameter gradients."""
        logits, (pre_acts, acts) = self.forward(x, keep=True)
        n = logits.shape[0]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        w = np.ones(n) if class_weights is None else class_weights[y]
        w = w / w.sum()
        loss = float(-(w * np.log(probs[np.arange(n), y] + 1e-300)).sum())
        delta = probs.copy()
        delta[np.arange(n), y] -= 1.0
        delta *= w[:, None]
        grads_w, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        for l in range(len(self.weights) - 1, -1, -1):
            grads_w[l] = delta.T @ acts[l]
            grads_b[l] = delta.sum(axis=0)
            if l > 0:
                delta = (delta @ self.weights[l]) * gelu_grad(pre_acts[l - 1])
        return loss, grads_w, grads_b


@dataclass
class SgdMomentum:
    lr0: float
    momentum: float
    total_steps: int
    lr_floor_ratio: float = 0.01
    step_count: int = 0
    vel_w: list = field(default_factory=list)
    vel_b: list = field(default_factory=list)

    def lr(self) -> float:
        t = min(self.step_count / max(self.total_steps, 1), 1.0)
        cos = 0.5 * (1.0 + np.cos(np.pi * t))
        return self.lr0 * (self.lr_floor_ratio + (1.0 - self.lr_floor_ratio) * cos)

    def update(self, net: Mlp, grads_w, grads_b):
        if not self.vel_w:
            self.vel_w = [np.zeros_like(w) for w in net.weights]
            self.vel_b = [np.zeros_like(b) for b in net.biases]
        lr = self.lr()
        for l in range(len(net.weights)):
            self.vel_w[l] = self.momentum * self.vel_w[l] - lr * grads_w[l]
            self.vel_b[l] = self.momentum * self.vel_b[l] - lr * grads_b[l]
            net.weights[l] += self.vel_w[l]
            net.biases[l] += self.vel_b[l]
        self.step_count += 1
