"""Adam optimizer with bias correction and resettable state."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamState:
    """Per-parameter moments plus the shared step counter.

    ``reset`` zeroes everything; used at training phase boundaries.
    """

    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr0: float = 1e-4, **kw) -> "AdamState":
        st = cls(lr0=lr0, **kw)
        for name, p in params.items():
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        return st

    def reset(self):
        self.t = 0
        for name in self.m:
            self.m[name][...] = 0
            self.v[name][...] = 0


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float | None = None):
    """One in-place Adam update from the gradients stored on ``params``.

    A parameter whose grad is None is treated as zero-gradient and, with
    zero moments, stays bit-identical (this is what decouples inactive
    branches of the model).
    """
    if lr is None:
        lr = state.lr0
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name}")
        if g.size and not math.isfinite(float(g.min()) + float(g.max())):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: dict[str, Tensor]):
    for p in params.values():
        p.zero_grad()
