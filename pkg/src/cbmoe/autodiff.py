"""Reverse-mode automatic differentiation over numpy float64 arrays.

Small, deterministic tape: every op records its parents and a closure that
scatters the output gradient back to them. Arrays are always float64 and
reductions run in numpy's fixed index order, so repeated runs of the same
graph are bit-identical. Intended for desk-scale models; no views are
shared between tensors (ops copy what they must).
"""
from __future__ import annotations

import contextlib

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (evaluation fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Backpropagate from this tensor. Scalar roots default to seed 1."""
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError("seed shape mismatch")
        order = _topo_order(self)
        self.grad = seed if self.grad is None else self.grad + seed
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar -------------------------------------------------------
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

    def __getitem__(self, key):
        return slice_(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor.__new__(Tensor)
    t.data = data
    t.grad = None
    t.requires_grad = requires
    if requires:
        t._parents = tuple(p for p in parents if p.requires_grad)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def _topo_order(root: Tensor):
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, it = stack[-1]
        advanced = False
        for p in it:
            if p.requires_grad and id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                advanced = True
                break
        if not advanced:
            order.append(node)
            stack.pop()
    return order


def _accum(t: Tensor, g):
    # rebind, never mutate: grad arrays may be shared between nodes
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# elementwise arithmetic ----------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), backward)


def sub(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), backward)


def mul(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), backward)


def div(a, b):
    a, b = _lift(a), _lift(b)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out, (a, b), backward)


def neg(a):
    a = _lift(a)

    def backward(g):
        _accum(a, -g)

    return _make(-a.data, (a,), backward)


def square(a):
    a = _lift(a)

    def backward(g):
        _accum(a, 2.0 * a.data * g)

    return _make(a.data * a.data, (a,), backward)


# matrix products -----------------------------------------------------------

def matmul(a, b):
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out, (a, b), backward)


def multi_affine(x, w, b):
    """Apply K affine maps to a shared input.

    x: (N, Din), w: (K, Dout, Din), b: (K, Dout) -> (N, K, Dout).
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    out = np.einsum("nd,kod->nko", x.data, w.data, optimize=True) + b.data[None, :, :]

    def backward(g):
        if x.requires_grad:
            _accum(x, np.einsum("nko,kod->nd", g, w.data, optimize=True))
        if w.requires_grad:
            _accum(w, np.einsum("nko,nd->kod", g, x.data, optimize=True))
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(out, (x, w, b), backward)


def grouped_affine(x, w, b):
    """Apply K affine maps to K per-group inputs.

    x: (N, K, Din), w: (K, Dout, Din), b: (K, Dout) -> (N, K, Dout).
    """
    x, w, b = _lift(x), _lift(w), _lift(b)
    out = np.einsum("nkd,kod->nko", x.data, w.data, optimize=True) + b.data[None, :, :]

    def backward(g):
        if x.requires_grad:
            _accum(x, np.einsum("nko,kod->nkd", g, w.data, optimize=True))
        if w.requires_grad:
            _accum(w, np.einsum("nko,nkd->kod", g, x.data, optimize=True))
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _make(out, (x, w, b), backward)


# reductions and shape ops ---------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False):
    a = _lift(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g_full = g
        if axis is not None and not keepdims:
            g_full = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g_full, a.data.shape))

    return _make(np.asarray(out, dtype=np.float64), (a,), backward)


def mean_(a, axis=None, keepdims: bool = False):
    a = _lift(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape):
    a = _lift(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a):
    """2-D transpose."""
    a = _lift(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def concat(tensors, axis: int = -1):
    ts = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _make(out, tuple(ts), backward)


def stack(tensors, axis: int = 0):
    ts = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def backward(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accum(t, np.take(g, i, axis=axis))

    return _make(out, tuple(ts), backward)


def slice_(a, key):
    """Basic (non-fancy) indexing; use take() for integer-array gathers."""
    a = _lift(a)
    out = a.data[key]

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[key] += g
        _accum(a, ga)

    return _make(np.array(out, dtype=np.float64), (a,), backward)


def take(a, indices, axis: int = 0):
    """Gather along an axis with an integer index array (repeats allowed)."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(np.moveaxis(ga, axis, 0), idx, np.moveaxis(g, axis, 0))
        _accum(a, ga)

    return _make(out, (a,), backward)


def select_index(a, indices):
    """Pick one column per row: out[n] = a[n, indices[n]] for a 2-D tensor."""
    a = _lift(a)
    idx = np.asarray(indices, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, (rows, idx), g)
        _accum(a, ga)

    return _make(out, (a,), backward)


# elementwise nonlinearities --------------------------------------------------

def exp(a):
    a = _lift(a)
    out = np.exp(a.data)

    def backward(g):
        _accum(a, g * out)

    return _make(out, (a,), backward)


def log(a):
    a = _lift(a)

    def backward(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), backward)


def tanh(a):
    a = _lift(a)
    out = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return _make(out, (a,), backward)


def sigmoid(a):
    a = _lift(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accum(a, g * out * (1.0 - out))

    return _make(out, (a,), backward)


def leaky_relu(a, alpha: float = 0.01):
    a = _lift(a)
    out = np.where(a.data >= 0, a.data, alpha * a.data)

    def backward(g):
        _accum(a, g * np.where(a.data >= 0, 1.0, alpha))

    return _make(out, (a,), backward)


def clamp(a, lo=None, hi=None):
    """Clip values; gradient passes only where the input was inside [lo, hi]."""
    a = _lift(a)
    out = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data)
    if lo is not None:
        mask = mask * (a.data >= lo)
    if hi is not None:
        mask = mask * (a.data <= hi)

    def backward(g):
        _accum(a, g * mask)

    return _make(out, (a,), backward)


# stable softmax family --------------------------------------------------------

def log_softmax(a, axis: int = -1):
    a = _lift(a)
    shift = sub(a, np.max(a.data, axis=axis, keepdims=True))
    lse = log(sum_(exp(shift), axis=axis, keepdims=True))
    return sub(shift, lse)


def softmax(a, axis: int = -1):
    return exp(log_softmax(a, axis=axis))


# gradient utilities ------------------------------------------------------------

def zero_grads(params):
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def check_gradients(loss_fn, params: dict, step: float = 1e-5,
                    rel_tol: float = 1e-4, scale_floor: float = 1e-4):
    """Compare analytic gradients of loss_fn() against central differences.

    loss_fn must rebuild the forward graph from the current param values on
    every call. The error is |analytic - fd| / max(|analytic|, |fd|,
    scale_floor): entries below the floor are effectively compared
    absolutely at rel_tol * scale_floor, which sits above the central
    difference roundoff noise (~1e-10 at step 1e-5) while still catching
    real gradient errors. Raises AssertionError on the first violation and
    returns the worst error seen.
    """
    zero_grads(params)
    loss = loss_fn()
    loss.backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
                for k, p in params.items()}
    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + step
                f_plus = loss_fn().item()
                flat[i] = orig - step
                f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            an = analytic[name].reshape(-1)[i]
            err = abs(fd - an) / max(abs(fd), abs(an), scale_floor)
            worst = max(worst, err)
            if err > rel_tol:
                raise AssertionError(
                    f"gradient mismatch at {name}[{i}]: analytic={an} fd={fd} rel={err:.3e}")
    return worst
