"""Bias-corrected adaptive-moment (Adam) parameter updates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Parameter


@dataclass
class AdamState:
    """First/second moment buffers plus a shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """Apply one Adam update in place to every trainable parameter.

    ``grads`` maps parameter names to gradient arrays of matching shape.
    Parameters absent from ``grads`` are skipped.
    """
    if isinstance(params, dict):
        params = params.values()
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p in params:
        if not p.trainable or p.name not in grads:
            continue
        g = grads[p.name]
        if g.shape != p.values.shape:
            raise ValueError(
                f"gradient shape {g.shape} != parameter {p.name} shape {p.values.shape}")
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.values)
            state.v[p.name] = np.zeros_like(p.values)
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
