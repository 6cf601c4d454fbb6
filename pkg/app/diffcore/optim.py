from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple

import numpy as np

from app.diffcore.tensor import Tensor
from app.errors import NonFiniteGradientError, ShapeError


@dataclass
class AdamState:
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.5,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Mapping[str, Tensor], AdamState]:
    """One bias-corrected Adam update.

    Parameter arrays are rebound, never written in place.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError("adam", f"gradient for unknown parameter '{name}'")
        if g.shape != params[name].shape:
            raise ShapeError("adam", f"gradient {g.shape} does not match parameter '{name}' {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)

    state.step += 1
    t = state.step
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = (1 - beta1) * g if m is None else beta1 * m + (1 - beta1) * g
        v = (1 - beta2) * g * g if v is None else beta2 * v + (1 - beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
