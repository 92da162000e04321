"""Adam with bias correction, on dicts of named arrays."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteGradient, ShapeMismatch


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray], **hyper) -> AdamState:
        return cls(**hyper,
                   first_moment={k: np.zeros_like(v) for k, v in params.items()},
                   second_moment={k: np.zeros_like(v) for k, v in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One update. Returns new parameter arrays and a new state; inputs are untouched."""
    for k, g in grads.items():
        if k not in params or g.shape != params[k].shape:
            raise ShapeMismatch(f"gradient {k!r} does not match parameters")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in {k!r}")
    t = state.step_count + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, m_out, v_out = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = state.first_moment.get(k)
        v = state.second_moment.get(k)
        m = np.zeros_like(p) if m is None else m
        v = np.zeros_like(p) if v is None else v
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
        m_out[k] = m.astype(p.dtype, copy=False)
        v_out[k] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m_out, v_out)
