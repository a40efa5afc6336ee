"""Rectified Adam, plain Adam and the cosine-to-zero learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, NumericalError


def cosine_multiplier(epoch, epochs):
    """0.5 * (1 + cos(pi * epoch / epochs)); 1 at epoch 0 and 0 at ``epochs``."""
    return 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))


def rho_t(t, beta2=0.999):
    """Length of the approximated simple moving average at step ``t``."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** t
    return rho_inf - 2.0 * t * b2t / (1.0 - b2t)


@dataclass
class OptimizerState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def radam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, rectify=True):
    """Update ``params`` (name -> ndarray, in place) from ``grads``.

    With ``rectify`` the adaptive step is used only once the variance
    estimate is tractable (rho_t > 4); before that the bias-corrected
    momentum is applied directly. ``rectify=False`` is Adam.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {name!r} ({bad} entries) at step {state.t + 1}")
    state.t += 1
    t = state.t
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    rho = rho_t(t, beta2)
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    adaptive = rho > 4.0 or not rectify
    if rectify and adaptive:
        r = math.sqrt((rho - 4) * (rho - 2) * rho_inf / ((rho_inf - 4) * (rho_inf - 2) * rho))
    else:
        r = 1.0
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        if adaptive:
            step = r * m_hat / (np.sqrt(v / bc2) + eps)
        else:
            step = m_hat
        p -= (lr * step).astype(p.dtype, copy=False)
    return state


OPTIMIZERS = ("radam", "adam")


def optimizer_step(kind, params, grads, state, lr):
    if kind not in OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {kind!r}; expected one of {OPTIMIZERS}")
    return radam_step(params, grads, state, lr, rectify=kind == "radam")
