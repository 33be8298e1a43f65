"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float32 for training, float64 for gradient checks).
Each op records its parents and a vector-Jacobian closure; ``backward()`` on a
scalar walks the tape in reverse topological order. ``no_grad()`` disables
taping so inference runs at plain-numpy cost.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import ndtri

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad over axes that were broadcast up from `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents")

    def __init__(self, values, requires_grad: bool = False, parents=()):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents  # tuple of (Tensor, vjp closure)

    # -- bookkeeping -------------------------------------------------------

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def size(self):
        return self.values.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.values.size != 1:
            raise ValueError("backward() requires a scalar output")
        # Iterative topological sort: deep tapes must not hit the recursion limit.
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.values)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, vjp in node._parents:
                g = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.values)
                parent.grad += g

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    v = np.asarray(x)
    if dtype is not None:
        v = v.astype(dtype, copy=False)
    return Tensor(v)


def _make(values, pairs) -> Tensor:
    """Build an op output; prune the tape under no_grad or constant parents."""
    pairs = [(p, fn) for p, fn in pairs if p.requires_grad or p._parents]
    if _GRAD_ENABLED and pairs:
        return Tensor(values, requires_grad=True, parents=tuple(pairs))
    return Tensor(values)


def _coerce(a, b):
    """Lift python scalars to the partner tensor's dtype (avoids f32->f64 creep)."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = as_tensor(b, dtype=a.dtype if np.isscalar(b) else None)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = as_tensor(a, dtype=b.dtype if np.isscalar(a) else None)
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.values + b.values
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(g, b.shape))])


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.values - b.values
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape)),
                       (b, lambda g: _unbroadcast(-g, b.shape))])


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out = a.values * b.values
    return _make(out, [(a, lambda g: _unbroadcast(g * b.values, a.shape)),
                       (b, lambda g: _unbroadcast(g * a.values, b.shape))])


def power(a, p) -> Tensor:
    a = as_tensor(a)
    out = a.values ** p
    return _make(out, [(a, lambda g: g * p * a.values ** (p - 1))])


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands of rank >= 2")
    out = np.matmul(a.values, b.values)

    def ga(g):
        return _unbroadcast(np.matmul(g, b.values.swapaxes(-1, -2)), a.shape)

    def gb(g):
        return _unbroadcast(np.matmul(a.values.swapaxes(-1, -2), g), b.shape)

    return _make(out, [(a, ga), (b, gb)])


# -- shape manipulation ------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.values.reshape(shape)
    return _make(out, [(a, lambda g: g.reshape(a.shape))])


def swapaxes(a, ax1, ax2) -> Tensor:
    a = as_tensor(a)
    out = a.values.swapaxes(ax1, ax2)
    return _make(out, [(a, lambda g: g.swapaxes(ax1, ax2))])


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.values, shape).copy()
    return _make(out, [(a, lambda g: _unbroadcast(g, a.shape))])


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    pairs = []
    start = 0
    for t in tensors:
        extent = t.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(start, start + extent)
        pairs.append((t, (lambda s: lambda g: g[tuple(s)])(tuple(sl))))
        start += extent
    return _make(out, pairs)


def slice_(a, key) -> Tensor:
    a = as_tensor(a)
    out = a.values[key]

    def vjp(g):
        full = np.zeros_like(a.values)
        full[key] = g
        return full

    return _make(out, [(a, vjp)])


def split(a, sections: int, axis=-1):
    """Even split into `sections` views along axis."""
    a = as_tensor(a)
    extent = a.shape[axis]
    if extent % sections:
        raise ValueError(f"cannot split extent {extent} into {sections} equal parts")
    step = extent // sections
    outs = []
    for i in range(sections):
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(i * step, (i + 1) * step)
        outs.append(slice_(a, tuple(sl)))
    return outs


# -- reductions --------------------------------------------------------------


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.shape).copy()

    return _make(out, [(a, vjp)])


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- nonlinearities ----------------------------------------------------------


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.values))
    out = a.values * sig
    return _make(out, [(a, lambda g: g * (sig * (1.0 + a.values * (1.0 - sig))))])


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return _make(out, [(a, vjp)])


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / var 1 (no affine)."""
    a = as_tensor(a)
    mu = a.values.mean(axis=-1, keepdims=True)
    xc = a.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * out).mean(axis=-1, keepdims=True)
        return inv * (g - gm - out * gy)

    return _make(out, [(a, vjp)])


# -- indexing ----------------------------------------------------------------


def embedding(table, idx) -> Tensor:
    """Row lookup: table (V, D), idx int array of any shape -> idx.shape + (D,)."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.values[idx]

    def vjp(g):
        gt = np.zeros_like(table.values)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return gt

    return _make(out, [(table, vjp)])


def gather_rows(a, idx) -> Tensor:
    """Per-batch row gather: a (B, N, D), idx (B, M) -> (B, M, D)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    bsel = np.arange(a.shape[0])[:, None]
    out = a.values[bsel, idx]

    def vjp(g):
        ga = np.zeros_like(a.values)
        np.add.at(ga, (bsel, idx), g)
        return ga

    return _make(out, [(a, vjp)])


def cross_entropy(logits, targets) -> Tensor:
    """Mean NLL of integer targets under softmax(logits); logits (N, K)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1)) - shifted[np.arange(len(targets)), targets]
    out = np.asarray(logz.mean(), dtype=logits.dtype)

    def vjp(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(len(targets)), targets] -= 1.0
        return g * probs / len(targets)

    return _make(out, [(logits, vjp)])


def nll_rows(logits, targets) -> Tensor:
    """Per-row NLL (N,) of integer targets under softmax(logits (N, K))."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits.values - logits.values.max(axis=-1, keepdims=True)
    out = np.log(np.exp(shifted).sum(axis=-1)) - shifted[np.arange(len(targets)), targets]

    def vjp(g):
        probs = np.exp(shifted)
        probs /= probs.sum(axis=-1, keepdims=True)
        probs[np.arange(len(targets)), targets] -= 1.0
        return probs * g[:, None]

    return _make(out, [(logits, vjp)])


# -- initializers ------------------------------------------------------------


def trunc_normal(rng, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) truncated at +-2 std, via inverse-CDF on uniforms."""
    lo, hi = 0.0227501319, 0.9772498681  # Phi(-2), Phi(2)
    u = rng.uniform(shape) * (hi - lo) + lo
    return (ndtri(u) * std).astype(dtype)
