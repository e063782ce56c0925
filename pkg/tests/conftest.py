import numpy as np
import pytest

from schedlab.tensor import Tape, Tensor, backward


def numeric_gradient(f, tensors, h=1e-6):
    """Central finite differences of a scalar function of several Tensors."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = t.data[i]
            t.data[i] = orig + h
            fp = f(tensors).item()
            t.data[i] = orig - h
            fm = f(tensors).item()
            t.data[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def gradcheck(f, arrays, h=1e-6, floor=1e-6):
    """Max relative error between analytic and numeric gradients.

    ``f`` maps a list of Tensors to a scalar Tensor; inputs are promoted
    to float64 so finite differences are trustworthy.
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
               for a in arrays]
    with Tape() as tape:
        out = f(tensors)
    backward(tape, out)
    numeric = numeric_gradient(f, tensors, h)
    worst = 0.0
    for t, num in zip(tensors, numeric):
        denom = np.maximum(np.abs(num), floor)
        worst = max(worst, float((np.abs(t.grad - num) / denom).max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(0)
