"""Adam with bias correction, and the exponential learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, beta1=0.9, beta2=0.999, eps=1e-8):
        shapes = [np.shape(_val(p)) for p in params]
        return cls(
            m=[np.zeros(s) for s in shapes],
            v=[np.zeros(s) for s in shapes],
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def _val(p):
    return p.value if hasattr(p, "value") else p


def adam_step(params, grads, state: AdamState, lr: float):
    """One in-place Adam update of ``params`` (Tensors or arrays).

    Returns the (mutated) params list and state for convenience.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("adam_step: parameter/gradient count mismatch")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        pv = _val(p)
        gv = np.asarray(_val(g), dtype=np.float64)
        if gv.shape != pv.shape:
            raise ValueError(f"adam_step: shape mismatch {gv.shape} vs {pv.shape}")
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1.0 - b1) * gv
        v *= b2
        v += (1.0 - b2) * gv * gv
        pv -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Exponential decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if not (0 <= step <= total_steps):
        raise ValueError("step outside [0, total_steps]")
    if not (lr_start >= lr_end > 0):
        raise ValueError("need lr_start >= lr_end > 0")
    if total_steps == 0:
        return lr_start
    return lr_start * (lr_end / lr_start) ** (step / total_steps)
