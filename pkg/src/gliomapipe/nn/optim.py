from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict

import numpy as np


def xavier_bound(shape, transposed=False) -> float:
    """Glorot uniform bound ``sqrt(6 / (fan_in + fan_out))`` over the full receptive field.

    Conv weights are ``(C_out, C_in, kh, kw)``; transposed-conv weights are
    ``(C_in, C_out, kh, kw)``.
    """
    a, b, kh, kw = shape
    c_out, c_in = (b, a) if transposed else (a, b)
    field_size = kh * kw
    return math.sqrt(6.0 / (c_in * field_size + c_out * field_size))


def xavier_init(weight, bias, rng, transposed=False) -> None:
    """Fill ``weight`` in place from U(-a, a) and zero ``bias``."""
    a = xavier_bound(weight.shape, transposed)
    weight[...] = rng.uniform(-a, a, size=weight.shape)
    bias[...] = 0


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
