from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ModelParams


class ContractViolation(ValueError):
    pass


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: ModelParams,
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """One bias-corrected Adam update, in place. Gradients are left untouched."""
    if lr < 0 or eps <= 0 or not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
        raise ContractViolation(f"bad Adam hyperparameters lr={lr} b1={beta1} b2={beta2} eps={eps}")
    for p in params:
        if p.grad.shape != p.data.shape:
            raise ContractViolation(f"{p.name}: grad shape {p.grad.shape} != value shape {p.data.shape}")

    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for p in params:
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state
