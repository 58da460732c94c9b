from __future__ import annotations

import math

import numpy as np


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in {name!r} ({bad} of {np.size(g)} entries)")


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, in place.

    ``state`` holds ``t`` and per-parameter ``m``/``v`` slots; an empty dict
    is a fresh optimizer.
    """
    _check_finite(grads)
    t = state.get("t", 0) + 1
    state["t"] = t
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        m[name] *= beta1
        m[name] += (1.0 - beta1) * g
        v[name] *= beta2
        v[name] += (1.0 - beta2) * (g * g)
        p -= (lr * (m[name] / bc1) / (np.sqrt(v[name] / bc2) + eps)).astype(p.dtype)
    return params, state


def sgd_momentum_step(params, grads, state, lr, momentum=0.9):
    """v <- mu v + g; p <- p - lr v, in place."""
    _check_finite(grads)
    vel = state.setdefault("v", {})
    state["t"] = state.get("t", 0) + 1
    for name, p in params.items():
        g = grads[name]
        if name not in vel:
            vel[name] = np.zeros_like(p)
        vel[name] *= momentum
        vel[name] += g
        p -= (lr * vel[name]).astype(p.dtype)
    return params, state


def step_lr(epoch, lr0, gamma, step):
    if step <= 0:
        raise ValueError("step must be positive")
    return lr0 * gamma ** math.floor(epoch / step)


class Adam:
    slots = ("m", "v")

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must be in [0, 1)")
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {}

    def step(self, params, grads, lr):
        adam_step(params, grads, self.state, lr, self.beta1, self.beta2, self.eps)


class SGDMomentum:
    slots = ("v",)

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.state = {}

    def step(self, params, grads, lr):
        sgd_momentum_step(params, grads, self.state, lr, self.momentum)
