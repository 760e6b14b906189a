"""Minimal define-by-run reverse-mode differentiation over dense float64 arrays.

Every primitive accepts plain ``numpy`` arrays or :class:`Tensor` objects. When
no operand is a tensor that requires a gradient the primitive simply returns a
``numpy`` array, so the same model code serves both the recorded (training)
path and the fast evaluation path.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_squares(tanh(matmul(x, w)))
    grads = backward(tape, loss, [w])

Second derivatives of activations are primitives in their own right
(``tanh_d``, ``tanh_dd``, ``elu_d``, ``elu_dd``) so an input gradient built from
them can itself be differentiated with a single reverse sweep.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "grad_check", "value",
    "matmul", "bmv", "add", "sub", "mul", "scale", "neg", "transpose",
    "reshape", "concat", "stack", "take", "sum_squares",
    "tanh", "tanh_d", "tanh_dd", "elu", "elu_d", "elu_dd",
]


class ShapeError(ValueError):
    """Operands of a primitive have non-conformable shapes."""


class Tensor:
    """A recorded array value.

    ``parents`` holds ``(parent, vjp)`` pairs, where ``vjp`` maps the gradient
    of this node to the gradient contribution of ``parent``.
    """

    __slots__ = ("value", "parents", "requires_grad", "name", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 parents: tuple = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def isfinite(self) -> bool:
        return bool(np.all(np.isfinite(self.value)))

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __getitem__(self, index): return take(self, index)


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended when created, so operands always precede their results.
    Only one tape records at a time; entering a tape inside another is an error.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.visits = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise RuntimeError("a tape is already recording")
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = None


def value(x) -> np.ndarray:
    """Underlying array of a tensor (or the array itself)."""
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _record(out: np.ndarray, parents: list) -> Tensor:
    node = Tensor(out, requires_grad=True, parents=tuple(parents))
    tape = Tape._active
    if tape is not None:
        tape.nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _shape_fail(op: str, *arrays) -> ShapeError:
    shapes = ", ".join(str(a.shape) for a in arrays)
    return ShapeError(f"{op}: operand shapes {shapes} are not conformable")


# ---------------------------------------------------------------- linear ops

def matmul(a, b):
    """Matrix product with ``numpy.matmul`` batching semantics (operands >= 2-D)."""
    av, bv = value(a), value(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise _shape_fail("matmul", av, bv)
    try:
        out = av @ bv
    except ValueError:
        raise _shape_fail("matmul", av, bv) from None
    ta, tb = _tracked(a), _tracked(b)
    if not (ta or tb):
        return out
    parents = []
    if ta:
        parents.append((a, lambda g: _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)))
    if tb:
        parents.append((b, lambda g: _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)))
    return _record(out, parents)


def bmv(m, v):
    """Batched matrix-vector product: ``out[..., i] = sum_j m[..., i, j] v[..., j]``."""
    mv, vv = value(m), value(v)
    if mv.ndim < 2 or vv.ndim < 1 or mv.shape[-1] != vv.shape[-1]:
        raise _shape_fail("bmv", mv, vv)
    try:
        out = (mv @ vv[..., None])[..., 0]
    except ValueError:
        raise _shape_fail("bmv", mv, vv) from None
    tm, tv = _tracked(m), _tracked(v)
    if not (tm or tv):
        return out
    parents = []
    if tm:
        parents.append((m, lambda g: _unbroadcast(g[..., :, None] * vv[..., None, :], mv.shape)))
    if tv:
        parents.append((v, lambda g: _unbroadcast(
            (np.swapaxes(mv, -1, -2) @ g[..., None])[..., 0], vv.shape)))
    return _record(out, parents)


def _binary(op: str, a, b, fwd, ga, gb):
    av, bv = value(a), value(b)
    try:
        out = fwd(av, bv)
    except ValueError:
        raise _shape_fail(op, av, bv) from None
    ta, tb = _tracked(a), _tracked(b)
    if not (ta or tb):
        return out
    parents = []
    if ta:
        parents.append((a, lambda g: _unbroadcast(ga(g, av, bv), av.shape)))
    if tb:
        parents.append((b, lambda g: _unbroadcast(gb(g, av, bv), bv.shape)))
    return _record(out, parents)


def add(a, b):
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    """Elementwise (broadcasting) product."""
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, c: float):
    """Multiply by a constant scalar."""
    c = float(c)
    out = value(a) * c
    if not _tracked(a):
        return out
    return _record(out, [(a, lambda g: g * c)])


def neg(a):
    return scale(a, -1.0)


# ------------------------------------------------------------- shape ops

def transpose(a):
    """Swap the last two axes."""
    av = value(a)
    if av.ndim < 2:
        raise _shape_fail("transpose", av)
    out = np.swapaxes(av, -1, -2)
    if not _tracked(a):
        return out
    return _record(out, [(a, lambda g: np.swapaxes(g, -1, -2))])


def reshape(a, shape: tuple):
    av = value(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {av.shape} into {shape}") from None
    if not _tracked(a):
        return out
    return _record(out, [(a, lambda g: g.reshape(av.shape))])


def concat(items: Sequence, axis: int = -1):
    vals = [value(x) for x in items]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise _shape_fail("concat", *vals) from None
    if not any(_tracked(x) for x in items):
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])
    parents = []
    for x, lo, hi in zip(items, bounds[:-1], bounds[1:]):
        if _tracked(x):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(lo, hi)
            sl = tuple(sl)
            parents.append((x, lambda g, sl=sl: g[sl]))
    return _record(out, parents)


def stack(items: Sequence, axis: int = 0):
    vals = [value(x) for x in items]
    try:
        out = np.stack(vals, axis=axis)
    except ValueError:
        raise _shape_fail("stack", *vals) from None
    if not any(_tracked(x) for x in items):
        return out
    parents = []
    for i, x in enumerate(items):
        if _tracked(x):
            parents.append((x, lambda g, i=i: np.take(g, i, axis=axis)))
    return _record(out, parents)


def take(a, index):
    """Basic (slice/integer) indexing."""
    av = value(a)
    out = av[index]
    if not _tracked(a):
        return out

    def vjp(g):
        full = np.zeros_like(av)
        full[index] += g
        return full
    return _record(out, [(a, vjp)])


# ----------------------------------------------------------- reductions

def sum_squares(a, axis=None):
    """Sum of squared entries, over all entries or along ``axis`` (kept as a dimension)."""
    av = value(a)
    if axis is None:
        out = np.array(np.sum(av * av))
    else:
        out = np.sum(av * av, axis=axis, keepdims=True)
    if not _tracked(a):
        return out
    return _record(out, [(a, lambda g: 2.0 * g * av)])


# ---------------------------------------------------------- activations

def _unary(a, fwd, deriv):
    av = value(a)
    out = fwd(av)
    if not _tracked(a):
        return out
    return _record(out, [(a, lambda g: g * deriv(av))])


def _tanh_d(x):
    t = np.tanh(x)
    return 1.0 - t * t


def _tanh_dd(x):
    t = np.tanh(x)
    return -2.0 * t * (1.0 - t * t)


def _tanh_ddd(x):
    t = np.tanh(x)
    s = 1.0 - t * t
    return s * (6.0 * t * t - 2.0)


def _elu(x):
    return np.where(x >= 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_d(x):
    return np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _elu_dd(x):
    return np.where(x >= 0, 0.0, np.exp(np.minimum(x, 0.0)))


def tanh(a):
    return _unary(a, np.tanh, _tanh_d)


def tanh_d(a):
    """First derivative of tanh, ``1 - tanh(x)**2``."""
    return _unary(a, _tanh_d, _tanh_dd)


def tanh_dd(a):
    """Second derivative of tanh."""
    return _unary(a, _tanh_dd, _tanh_ddd)


def elu(a):
    """Exponential-linear unit with alpha = 1."""
    return _unary(a, _elu, _elu_d)


def elu_d(a):
    return _unary(a, _elu_d, _elu_dd)


def elu_dd(a):
    # the third derivative coincides with the second for alpha = 1
    return _unary(a, _elu_dd, _elu_dd)


# ------------------------------------------------------------- backward

def backward(tape: Tape, loss, wrt: Iterable[Tensor]) -> dict:
    """Reverse sweep over ``tape`` seeded at the scalar ``loss``.

    Returns a dict mapping each tensor in ``wrt`` to its gradient. Leaves the
    loss does not depend on get zeros.
    """
    wrt = list(wrt)
    lv = value(loss)
    if lv.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {lv.shape}")
    grads: dict[int, np.ndarray] = {}
    if _tracked(loss):
        grads[id(loss)] = np.ones_like(lv)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            tape.visits += 1
            for parent, vjp in node.parents:
                contrib = vjp(g)
                key = id(parent)
                prev = grads.get(key)
                grads[key] = contrib if prev is None else prev + contrib
    return {w: grads.get(id(w), np.zeros_like(w.value)) for w in wrt}


def grad_check(fn: Callable[[dict], object], params: dict, h: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps a dict of parameters (arrays or tensors) to a scalar. For every
    parameter group the relative error ``|a - d| / max(|a|, |d|, 1e-12)`` is
    taken over the checked entries as vectors (2-norms); the maximum over groups
    is returned. ``max_entries`` limits the finite-difference work per group to
    a random subset of entries.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in base.items()}
    with Tape() as tape:
        loss = fn(leaves)
    analytic = backward(tape, loss, leaves.values())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, arr in base.items():
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a = analytic[leaves[k]].reshape(-1)[idx]
        d = np.empty(idx.size)
        for j, i in enumerate(idx):
            saved = flat[i]
            flat[i] = saved + h
            fp = float(value(fn(base)))
            flat[i] = saved - h
            fm = float(value(fn(base)))
            flat[i] = saved
            d[j] = (fp - fm) / (2.0 * h)
        err = np.linalg.norm(a - d) / max(np.linalg.norm(a), np.linalg.norm(d), 1e-12)
        worst = max(worst, float(err))
    return worst
