"""Minimal Adam with decoupled weight decay, for the two-kernel split problem."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    """First/second-moment accumulators and step counter.

    Accumulators are kept in float64 regardless of parameter dtype.
    """

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(
            m=np.zeros(params.shape, dtype=np.float64),
            v=np.zeros(params.shape, dtype=np.float64),
        )


def adam_step(
    params: np.ndarray,
    grads: np.ndarray,
    state: AdamState,
    learning_rate: float,
    weight_decay: float = 0.0,
    epsilon: float = 1e-8,
) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state``, returns new params.

    Weight decay is applied decoupled from the adaptive step so its strength
    does not depend on the gradient scale.
    """
    if params.shape != grads.shape:
        raise ValueError(f"params shape {params.shape} != grads shape {grads.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    out = params - learning_rate * m_hat / (np.sqrt(v_hat) + epsilon)
    if weight_decay:
        out = out - learning_rate * weight_decay * out
    return out
