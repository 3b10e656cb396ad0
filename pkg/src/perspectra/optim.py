"""Adam with decoupled weight decay over named float64 parameters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor


@dataclass
class OptimizerState:
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray | None],
    state: OptimizerState,
) -> OptimizerState:
    """Apply one bias-corrected AdamW update in place and return ``state``.

    Parameters absent from ``grads`` or mapped to None are skipped entirely:
    no moment update and no weight decay, as frameworks do for parameters
    that took no part in the loss. A zero array is a real zero gradient.
    """
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data = p.data
        if state.weight_decay:
            data *= 1.0 - state.lr * state.weight_decay
        data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    state.step = t
    return state


class AdamW:
    """Thin stateful wrapper around :func:`optimizer_step`."""

    def __init__(self, params: dict[str, Tensor], lr=1e-5, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = params
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)

    def step(self, grads: dict[str, np.ndarray | None]) -> None:
        optimizer_step(self.params, grads, self.state)
