"""Reverse-mode differentiation over numpy arrays.

Operations on :class:`Tensor` are recorded only while a :class:`GradientTape`
is active and at least one input is tracked (a parameter, a watched tensor,
or the output of a recorded op). Outside a tape every op is a thin numpy
call, which keeps inference cheap.

Vector-Jacobian rules are written with the same taped ops, so a gradient
computed with ``create_graph=True`` is itself differentiable. This is what
lets the loss reach the shape network through analytic normals.
"""

from __future__ import annotations

import itertools
import threading

import numpy as np

_state = threading.local()
_seq = itertools.count()


def _stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.paused = 0
    return _state


def is_recording() -> bool:
    st = _stack()
    return bool(st.tapes) and st.paused == 0


class _Pause:
    def __enter__(self):
        _stack().paused += 1

    def __exit__(self, *exc):
        _stack().paused -= 1


def no_record():
    """Context manager that suspends recording on all active tapes."""
    return _Pause()


class _Node:
    __slots__ = ("parents", "vjp", "seq")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp
        self.seq = next(_seq)


class Tensor:
    __slots__ = ("value", "requires_grad", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node = None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def __len__(self):
        return len(self.value)

    def __array__(self, dtype=None, copy=None):
        return self.value if dtype is None else self.value.astype(dtype)

    def __repr__(self):
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.value.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.value

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(value, parents, vjp) -> Tensor:
    out = Tensor(value)
    if is_recording() and any(p.tracked for p in parents):
        out.node = _Node(parents, vjp)
    return out


def stop_gradient(x) -> Tensor:
    """Copy of ``x`` that no gradient passes through."""
    return Tensor(value_of(x))


# ---------------------------------------------------------------- broadcasting


def unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and g.shape[i + lead] != 1
    )
    out = tsum(g, axes, keepdims=True) if axes else g
    return reshape(out, shape)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    src = x.shape
    return _make(
        np.broadcast_to(x.value, shape),
        (x,),
        lambda g, out: (unbroadcast(g, src),),
    )


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.value + b.value,
        (a, b),
        lambda g, out: (unbroadcast(g, sa), unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(
        a.value - b.value,
        (a, b),
        lambda g, out: (unbroadcast(g, sa), unbroadcast(neg(g), sb)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), lambda g, out: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out):
        ga = unbroadcast(mul(g, b), a.shape) if a.tracked else None
        gb = unbroadcast(mul(g, a), b.shape) if b.tracked else None
        return ga, gb

    return _make(a.value * b.value, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g, out):
        ga = unbroadcast(div(g, b), a.shape) if a.tracked else None
        gb = None
        if b.tracked:
            gb = unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _make(a.value / b.value, (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    return _make(
        a.value**p,
        (a,),
        lambda g, out: (mul(g, mul(p, power(a, p - 1.0))),),
    )


def matmul(a, b) -> Tensor:
    """``(..., k) @ (k, m)`` or plain 2-D products."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")

    def vjp(g, out):
        ga = matmul(g, transpose(b)) if a.tracked else None
        gb = None
        if b.tracked:
            k = a.shape[-1]
            a2 = reshape(a, (-1, k))
            g2 = reshape(g, (-1, g.shape[-1]))
            gb = matmul(transpose(a2), g2)
        return ga, gb

    return _make(a.value @ b.value, (a, b), vjp)


# ---------------------------------------------------------------- elementwise


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.exp(a.value), (a,), lambda g, out: (mul(g, out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), lambda g, out: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.sqrt(a.value), (a,), lambda g, out: (div(mul(g, 0.5), out),)
    )


def sin(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.sin(a.value), (a,), lambda g, out: (mul(g, cos(a)),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.cos(a.value), (a,), lambda g, out: (neg(mul(g, sin(a))),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), lambda g, out: (mul(g, mask),))


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    return _make(
        _sigmoid_np(a.value),
        (a,),
        lambda g, out: (mul(g, mul(out, sub(1.0, out))),),
    )


def softplus(a) -> Tensor:
    a = as_tensor(a)
    v = a.value
    return _make(
        np.logaddexp(0.0, v), (a,), lambda g, out: (mul(g, sigmoid(a)),)
    )


def where(cond, a, b) -> Tensor:
    """Elementwise select; ``cond`` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    fc = cond.astype(np.float64)
    return _make(
        np.where(cond, a.value, b.value),
        (a, b),
        lambda g, out: (
            unbroadcast(mul(g, fc), a.shape),
            unbroadcast(mul(g, 1.0 - fc), b.shape),
        ),
    )


def clip(a, lo=None, hi=None) -> Tensor:
    """Clamp with a zero gradient outside ``[lo, hi]``."""
    a = as_tensor(a)
    v = a.value
    keep = np.ones_like(v)
    if lo is not None:
        keep = keep * (v >= lo)
    if hi is not None:
        keep = keep * (v <= hi)
    return _make(np.clip(v, lo, hi), (a,), lambda g, out: (mul(g, keep),))


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    src = a.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g, out):
        if not keepdims:
            g = reshape(g, kept)
        return (broadcast_to(g, src),)

    return _make(a.value.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / max(n, 1))


def cumsum(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim

    def vjp(g, out):
        return (flip(cumsum(flip(g, ax), ax), ax),)

    return _make(np.cumsum(a.value, axis=ax), (a,), vjp)


def flip(a, axis) -> Tensor:
    a = as_tensor(a)
    return _make(np.flip(a.value, axis), (a,), lambda g, out: (flip(g, axis),))


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(
        a.value.reshape(shape), (a,), lambda g, out: (reshape(g, src),)
    )


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _make(
        np.transpose(a.value, axes), (a,), lambda g, out: (transpose(g, inv),)
    )


def expand_dims(a, axis) -> Tensor:
    a = as_tensor(a)
    return reshape(a, np.expand_dims(a.value, axis).shape)


def concatenate(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, out):
        grads = []
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if not p.tracked:
                grads.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(lo), int(hi))
            grads.append(index(g, tuple(sl)))
        return tuple(grads)

    return _make(
        np.concatenate([p.value for p in parts], axis=ax), tuple(parts), vjp
    )


def stack(parts, axis=-1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ax = axis % (parts[0].ndim + 1)
    return concatenate([expand_dims(p, ax) for p in parts], axis=ax)


def index(a, idx) -> Tensor:
    """``a[idx]`` for basic slices, integer arrays and boolean masks."""
    a = as_tensor(a)
    src = a.shape
    return _make(
        a.value[idx], (a,), lambda g, out: (scatter(g, idx, src),)
    )


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
        for i in items
    )


def scatter(g, idx, shape) -> Tensor:
    """Adjoint of :func:`index`: a zero array of ``shape`` with ``g`` added at ``idx``."""
    g = as_tensor(g)
    buf = np.zeros(shape)
    if _is_basic(idx):
        buf[idx] = g.value
    elif isinstance(idx, np.ndarray) and idx.dtype == bool:
        buf[idx] = g.value
    elif isinstance(idx, np.ndarray) and idx.ndim == 1 and len(shape) == 1 and idx.dtype != bool:
        buf[:] = np.bincount(idx, weights=g.value, minlength=shape[0])
    elif isinstance(idx, np.ndarray) and idx.ndim == 1 and len(shape) == 2:
        # row gather: one bincount per column beats np.add.at by a wide margin
        n = shape[0]
        gv = g.value.reshape(len(idx), -1)
        for c in range(gv.shape[1]):
            buf[:, c] = np.bincount(idx, weights=gv[:, c], minlength=n)
    else:
        np.add.at(buf, idx, g.value)
    return _make(buf, (g,), lambda gg, out: (index(gg, idx),))


# ---------------------------------------------------------------- helpers


def dot(a, b, axis=-1, keepdims=False) -> Tensor:
    return tsum(mul(a, b), axis=axis, keepdims=keepdims)


def norm(a, axis=-1, keepdims=False) -> Tensor:
    return sqrt(dot(a, a, axis=axis, keepdims=keepdims))


# ---------------------------------------------------------------- tape


class GradientTape:
    """Records one forward evaluation for later differentiation.

    A non-persistent tape may be differentiated once; a second call raises.
    Tapes nest: ops are visible to every active tape, and a gradient taken
    with ``create_graph=True`` while an outer tape is active is recorded on it.
    """

    def __init__(self, persistent: bool = False):
        self.persistent = persistent
        self._consumed = False
        self._watched: list[Tensor] = []

    def __enter__(self):
        st = _stack()
        st.tapes.append(self)
        # a tape opened inside no_record() still records its own evaluation
        self._outer_pause = st.paused
        st.paused = 0
        return self

    def __exit__(self, *exc):
        st = _stack()
        st.tapes.remove(self)
        st.paused = self._outer_pause

    def watch(self, x) -> Tensor:
        t = x if isinstance(x, Tensor) else Tensor(x)
        t.requires_grad = True
        self._watched.append(t)
        return t

    def gradient(self, target, sources, output_cotangent=None, create_graph=False):
        if self._consumed:
            raise RuntimeError("gradient tape already consumed")
        if not self.persistent:
            self._consumed = True
        return backward(target, sources, output_cotangent, create_graph)


def backward(target, sources, output_cotangent=None, create_graph=False):
    """Gradients of ``<cotangent, target>`` with respect to each source.

    Sources that do not influence the target receive zeros.
    """
    target = as_tensor(target)
    single = isinstance(sources, Tensor)
    srcs = [sources] if single else list(sources)
    if output_cotangent is None:
        cot = np.ones_like(target.value)
    else:
        cot = np.broadcast_to(value_of(output_cotangent), target.shape).astype(np.float64)
    src_ids = {id(s) for s in srcs}

    # reachable nodes; seq order is a valid topological order
    order, seen, todo = [], set(), [target]
    while todo:
        t = todo.pop()
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        order.append(t)
        todo.extend(p for p in t.node.parents if p.tracked)
    order.sort(key=lambda t: t.node.seq, reverse=True)

    grads: dict[int, Tensor] = {id(target): Tensor(cot)}
    ctx = _NullCtx() if create_graph else no_record()
    with ctx:
        for t in order:
            g = grads.get(id(t)) if id(t) in src_ids else grads.pop(id(t), None)
            if g is None:
                continue
            pgrads = t.node.vjp(g, t)
            for p, pg in zip(t.node.parents, pgrads):
                if pg is None or not p.tracked:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for s in srcs:
        g = grads.get(id(s))
        out.append(g if g is not None else Tensor(np.zeros_like(s.value)))
    return out[0] if single else out


class _NullCtx:
    def __enter__(self):
        return None

    def __exit__(self, *exc):
        return False
