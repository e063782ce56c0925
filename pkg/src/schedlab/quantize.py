"""Grouped straight-through Gumbel-softmax quantization."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


def gumbel_softmax_st(logits: Tensor, temperature: float,
                      rng: np.random.Generator | None = None):
    """Discretize grouped logits with straight-through gradients.

    logits has shape (..., G, V). Returns ``(hard, soft)`` where ``hard``
    is one-hot per group in the forward pass (argmax of the noised
    logits) with the gradient of the tempered softmax, and ``soft`` are
    the differentiable softmax probabilities used by the diversity loss.
    Pass ``rng=None`` for noise-free (test) behaviour.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if rng is not None:
        u = rng.random(logits.shape)
        noise = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
        noised = T.add(logits, noise.astype(logits.dtype))
    else:
        noised = logits
    soft = T.softmax(T.div(noised, float(temperature)), axis=-1)
    idx = np.argmax(noised.data, axis=-1)
    hard_np = np.zeros_like(soft.data)
    np.put_along_axis(hard_np, idx[..., None], 1.0, axis=-1)
    hard = T.straight_through(soft, hard_np)
    return hard, soft
