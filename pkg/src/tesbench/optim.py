"""Plain SGD and Adam updates over named parameter dicts.

Steps are rejected wholesale if any gradient is non-finite, so a diverging
loss can never half-update a model.
"""

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(RuntimeError):
    pass


def zero_grads(params):
    for p in params.values():
        p.grad = None


def _checked_grads(params):
    grads = {}
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g
    return grads


def sgd_step(params, learning_rate):
    """p <- p - lr * grad for every parameter; bit-deterministic."""
    grads = _checked_grads(params)
    for name, p in params.items():
        p.data = p.data - learning_rate * grads[name]


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, state, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam update with bias correction."""
    grads = _checked_grads(params)
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)
