"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps a float32/float64 numpy array. Operations execute
eagerly; when a :class:`Tape` is active they also append op records, and
:func:`backward` replays the records in reverse to accumulate gradients
into leaf tensors. A tape can be consumed by backward exactly once.
"""
from __future__ import annotations

import math

import numpy as np

# Forward results are checked for NaN/Inf after every op (min+max trick,
# no allocation). Disable only for profiling.
CHECK_FINITE = True


class AutodiffError(Exception):
    pass


class NonFiniteError(AutodiffError):
    """A forward value or gradient contained NaN or Inf."""


class TapeError(AutodiffError):
    """Tape misuse: replayed backward, non-scalar output, wrong tape."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered op records for one forward pass; one backward use only."""

    __slots__ = ("records", "consumed", "leaves")

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False
        self.leaves: dict[int, "Tensor"] = {}

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class _Record:
    __slots__ = ("inputs", "output", "backward", "tape")

    def __init__(self, inputs, output, backward, tape):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.tape = tape


class Tensor:
    """Dense numeric array with optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.node: _Record | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operators
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)


def _check_finite(arr: np.ndarray):
    if not CHECK_FINITE or arr.size == 0:
        return
    m = float(arr.min()) + float(arr.max())
    if not math.isfinite(m):
        raise NonFiniteError(f"non-finite value in forward result of shape {arr.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    _check_finite(data)
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None:
        tracked = False
        for t in inputs:
            if isinstance(t, Tensor) and (t.requires_grad or t.node is not None):
                tracked = True
                if t.requires_grad and t.node is None:
                    tape.leaves.setdefault(id(t), t)
        if tracked:
            rec = _Record(inputs, out, backward_fn, tape)
            out.node = rec
            tape.records.append(rec)
    return out


def backward(tape: Tape, scalar_output: Tensor) -> dict[Tensor, np.ndarray]:
    """Run reverse-mode accumulation, returning a leaf -> gradient map.

    Gradients are accumulated into ``leaf.grad``. Every leaf that
    participated in the tape receives a gradient (zero if the output does
    not depend on it).
    """
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if scalar_output.data.shape != ():
        raise TapeError(f"backward requires a 0-d output, got shape {scalar_output.data.shape}")
    node = scalar_output.node
    if node is None or node.tape is not tape:
        raise TapeError("output was not produced by this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(scalar_output): np.ones((), dtype=scalar_output.dtype)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        if g.size and not math.isfinite(float(g.min()) + float(g.max())):
            raise NonFiniteError("non-finite gradient encountered during backward")
        in_grads = rec.backward(g)
        for inp, ig in zip(rec.inputs, in_grads):
            if ig is None or not isinstance(inp, Tensor):
                continue
            if inp.node is None:
                if inp.requires_grad:
                    if ig.size and not math.isfinite(float(np.min(ig)) + float(np.max(ig))):
                        raise NonFiniteError(
                            "non-finite gradient encountered during backward")
                    inp.grad += ig
            else:
                prev = grads.get(id(inp))
                if prev is None:
                    grads[id(inp)] = ig
                else:
                    prev += ig
    return {leaf: leaf.grad for leaf in tape.leaves.values()}


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _is_pyscalar(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def add(a, b) -> Tensor:
    # Python scalars stay "weak" so they never widen a float32 graph.
    if _is_pyscalar(b):
        a = as_tensor(a)
        return _make(a.data + b, (a,), lambda g: (g,))
    if _is_pyscalar(a):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    if _is_pyscalar(b):
        a = as_tensor(a)
        return _make(a.data - b, (a,), lambda g: (g,))
    if _is_pyscalar(a):
        b = as_tensor(b)
        return _make(a - b.data, (b,), lambda g: (-g,))
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    if _is_pyscalar(b):
        a = as_tensor(a)
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if _is_pyscalar(a):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b) -> Tensor:
    if _is_pyscalar(b):
        a = as_tensor(a)
        return _make(a.data / b, (a,), lambda g: (g / b,))
    if _is_pyscalar(a):
        b = as_tensor(b)
        return _make(a / b.data, (b,),
                     lambda g: (-g * a / (b.data * b.data),))
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data / b.data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.maximum(a.data, 0), (a,), lambda g: (g * (a.data > 0),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bwd)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 1:
        return reshape(matmul(reshape(a, (1, -1)), b), b.data.shape[:-2] + b.data.shape[-1:])
    if b.data.ndim == 1:
        return reshape(matmul(a, reshape(b, (-1, 1))), a.data.shape[:-1])

    def bwd(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
        return (ga, gb)

    return _make(a.data @ b.data, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    """Basic slicing or integer-array gather; backward scatters with add."""
    a = as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _make(a.data[idx], (a,), bwd)


def gather(table, idx) -> Tensor:
    """Embedding-style row gather: ``table[idx]``."""
    return getitem(table, np.asarray(idx))


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bwd)


def mean_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = 1
        for ax in axes:
            n *= shape[ax]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, shape).copy(),)

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bwd)


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bwd)


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward returns ``hard`` exactly; gradient flows to ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.data.shape:
        raise ValueError("straight_through shape mismatch")
    return _make(hard.copy(), (soft,), lambda g: (g,))


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rate is 0 or rng is None."""
    a = as_tensor(a)
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.data.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# signal / normalization ops


def conv1d(x, w, b=None, stride: int = 1) -> Tensor:
    """1-d strided convolution with "same" padding.

    x: (B, C_in, T), w: (C_out, C_in, K), b: (C_out,).
    Output length is ceil(T / stride).
    """
    x, w = as_tensor(x), as_tensor(w)
    B, C_in, T = x.data.shape
    C_out, C_in2, K = w.data.shape
    if C_in != C_in2:
        raise ValueError(f"conv1d channel mismatch: {C_in} vs {C_in2}")
    t_out = -(-T // stride)
    pad_total = max((t_out - 1) * stride + K - T, 0)
    pl = pad_total // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pad_total - pl)))
    y = np.zeros((B, C_out, t_out), dtype=x.dtype)
    taps = []
    for k in range(K):
        xs = xp[:, :, k:k + stride * (t_out - 1) + 1:stride]
        taps.append(xs)
        y += np.einsum("oc,bct->bot", w.data[:, :, k], xs, optimize=True)

    def bwd(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for k in range(K):
            gw[:, :, k] = np.einsum("bot,bct->oc", g, taps[k], optimize=True)
            gxp[:, :, k:k + stride * (t_out - 1) + 1:stride] += np.einsum(
                "oc,bot->bct", w.data[:, :, k], g, optimize=True)
        return (gxp[:, :, pl:pl + T], gw, None)

    out = _make(y, (x, w, None), bwd)
    if b is not None:
        out = add(out, reshape(as_tensor(b), (1, -1, 1)))
    return out


def avgpool1d(x, k: int = 2) -> Tensor:
    """Average pool along the last axis; odd tails are zero-padded."""
    x = as_tensor(x)
    B, C, T = x.data.shape
    t_out = -(-T // k)
    pad = t_out * k - T
    xp = np.pad(x.data, ((0, 0), (0, 0), (0, pad)))
    y = xp.reshape(B, C, t_out, k).mean(-1)

    def bwd(g):
        gx = np.repeat(g / k, k, axis=-1)
        return (gx[:, :, :T],)

    return _make(y, (x,), bwd)


def layer_norm(x, gain, bias, axis=-1, eps: float = 1e-5) -> Tensor:
    mu = mean_(x, axis=axis, keepdims=True)
    xc = sub(x, mu)
    var = mean_(mul(xc, xc), axis=axis, keepdims=True)
    xh = div(xc, sqrt(add(var, eps)))
    return add(mul(xh, gain), bias)


def l2_normalize(x, axis=-1, eps: float = 1e-12) -> Tensor:
    n = sqrt(add(sum_(mul(x, x), axis=axis, keepdims=True), eps))
    return div(x, n)


def cosine_similarity(a, b, axis=-1) -> Tensor:
    return sum_(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)
