"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

from typing import Dict, List, Tuple

import numpy as np

from .errors import NonFiniteError
from .tensor import Tensor


class AdamState:
    """Per-parameter first/second moment estimates plus the shared step count."""

    def __init__(
        self,
        params: List[Tuple[str, Tensor]],
        learning_rate: float = 0.0015,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params
        }
        self.second_moment: Dict[str, np.ndarray] = {
            name: np.zeros_like(t.data) for name, t in params
        }


def adam_step(params: List[Tuple[str, Tensor]], state: AdamState) -> None:
    """One bias-corrected Adam update, in place. Parameters with no gradient
    (grad is None) are skipped; non-finite gradients are an error."""
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params:
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)


def zero_grads(params: List[Tuple[str, Tensor]]) -> None:
    for _, p in params:
        p.grad = None
