"""A small dense reverse-mode autodiff engine over float64 numpy arrays.

Every op returns a new :class:`Tensor`; when any input requires grad the
output records its parents and a closure mapping the output gradient to
input gradients.  :func:`backward` orders the recorded graph into a
:class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import NonFiniteValue, NotScalar, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    """Wrap a constant; float64 arrays are shared, not copied."""
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray) and x.dtype == np.float64:
        return _result("const", x, (), None)
    return Tensor(x)


# ops that only move entries around cannot create non-finite values
_SHAPE_OPS = frozenset({"transpose", "reshape", "concat", "getitem", "gather_rows"})


def _result(op: str, data, parents: Sequence[Tensor], grad_fn) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    # the sum is non-finite exactly when an entry is, or when entries are large enough to overflow
    if op not in _SHAPE_OPS and not math.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteValue(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast(op, a: np.ndarray, b: np.ndarray):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _result("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _result("log", y, (a,), lambda g: (g / x,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly zero is taken as 0."""
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(a.data)

    def grad(g):
        d = np.zeros_like(y)
        pos = y > 0
        d[pos] = 0.5 / y[pos]
        return (g * d,)

    return _result("sqrt", y, (a,), grad)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return _result("square", x * x, (a,), lambda g: (2.0 * g * x,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def elu(a, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    neg = x <= 0
    em1 = np.expm1(np.minimum(x, 0.0))
    y = np.where(neg, alpha * em1, x)
    return _result("elu", y, (a,), lambda g: (g * np.where(neg, alpha * (em1 + 1.0), 1.0),))


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    x = a.data
    pos = x > 0
    return _result("leaky_relu", np.where(pos, x, slope * x), (a,),
                   lambda g: (g * np.where(pos, 1.0, slope),))


def clip_min(a, floor: float) -> Tensor:
    """``max(a, floor)``; no gradient flows through clamped entries."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _result("clip_min", np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / shape


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def grad(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grad)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = math.prod(a.shape[ax] for ax in axes)
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    if ad.ndim > 2 and bd.ndim == 2 and ad.shape[-1] == bd.shape[0]:
        # stacked left operand times one matrix: a single 2-d product is faster
        lead = ad.shape[:-1]
        a2 = ad.reshape(-1, ad.shape[-1])
        y = (a2 @ bd).reshape(lead + (bd.shape[1],))

        def grad(g):
            g2 = g.reshape(-1, bd.shape[1])
            ga = (g2 @ bd.T).reshape(ad.shape) if need_a else None
            gb = a2.T @ g2 if need_b else None
            return ga, gb

        return _result("matmul", y, (a, b), grad)
    try:
        y = np.matmul(ad, bd)
    except ValueError:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}") from None

    def grad(g):
        # skip the product for a side that takes no gradient
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if need_a else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if need_b else None
        return ga, gb

    return _result("matmul", y, (a, b), grad)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape {old} -> {shape}") from None
    return _result("reshape", y, (a,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeMismatch("concat: " + ", ".join(str(t.shape) for t in tensors)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result("concat", y, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def grad(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _result("getitem", a.data[idx], (a,), grad)


def gather_rows(a, index) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def grad(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _result("gather_rows", a.data[index], (a,), grad)


# ---------------------------------------------------------------- softmax family


def softmax(a, axis: int = -1, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(mask.any(axis=axis)):
            raise ShapeMismatch("softmax: a slice has no unmasked entries")
        x = np.where(mask, x, -np.inf)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _result("softmax", s, (a,), grad)


def attention_softmax(src, dst, mask: np.ndarray, slope: float = 0.2) -> Tensor:
    """Fused ``softmax_j(leaky_relu(src[..., i] + dst[..., j]))`` restricted to ``mask``.

    ``src`` and ``dst`` have shape ``(K, N)``; ``mask`` is ``(N, N)`` boolean
    and must leave at least one entry per row.  Equivalent to composing
    :func:`add`, :func:`leaky_relu` and masked :func:`softmax`, with fewer
    passes over the ``(K, N, N)`` buffer.
    """
    src, dst = as_tensor(src), as_tensor(dst)
    if src.ndim != 2 or src.shape != dst.shape or mask.shape != (src.shape[1],) * 2:
        raise ShapeMismatch(f"attention_softmax: {src.shape}, {dst.shape}, mask {mask.shape}")
    if not np.all(mask.any(axis=1)):
        raise ShapeMismatch("attention_softmax: a row has no unmasked entries")
    mask = np.ascontiguousarray(mask, dtype=bool)
    sd, dd = np.ascontiguousarray(src.data), np.ascontiguousarray(dst.data)
    out = _kernels.dense_attention_forward(sd, dd, mask, float(slope))

    def grad(g):
        return _kernels.dense_attention_backward(np.ascontiguousarray(g), out, sd, dd, mask,
                                                 float(slope))

    return _result("attention_softmax", out, (src, dst), grad)


def segment_attention(src, dst, rows: np.ndarray, cols: np.ndarray, indptr: np.ndarray,
                      slope: float = 0.2) -> Tensor:
    """Edge-list form of :func:`attention_softmax` for sparse neighbourhoods.

    ``rows``/``cols`` list the ``E`` allowed ``(i, j)`` pairs sorted by row,
    ``indptr`` delimits each row's run.  Returns ``(K, E)`` weights.
    """
    src, dst = as_tensor(src), as_tensor(dst)
    n = src.shape[1]
    if src.ndim != 2 or src.shape != dst.shape or len(indptr) != n + 1:
        raise ShapeMismatch(f"segment_attention: {src.shape}, {dst.shape}, indptr {len(indptr)}")
    counts = np.diff(indptr)
    if np.any(counts == 0):
        raise ShapeMismatch("segment_attention: a row has no unmasked entries")
    sd, dd = np.ascontiguousarray(src.data), np.ascontiguousarray(dst.data)
    indptr, cols = np.asarray(indptr, np.int64), np.asarray(cols, np.int64)
    x = _kernels.csr_attention_forward(sd, dd, indptr, cols, float(slope))

    def grad(g):
        return _kernels.csr_attention_backward(np.ascontiguousarray(g), x, sd, dd, indptr, cols,
                                               float(slope))

    return _result("segment_attention", x, (src, dst), grad)


def segment_aggregate(alpha, h, rows: np.ndarray, cols: np.ndarray, indptr: np.ndarray) -> Tensor:
    """``out[k, i] = sum_e alpha[k, e] * h[cols[e]]`` over row ``i``'s edges; ``(K, N, dh)``."""
    alpha, h = as_tensor(alpha), as_tensor(h)
    K, E = alpha.shape
    n, dh = h.shape
    ad_, hd = np.ascontiguousarray(alpha.data), np.ascontiguousarray(h.data)
    indptr, cols = np.asarray(indptr, dtype=np.int64), np.asarray(cols, dtype=np.int64)
    out = _kernels.csr_aggregate_forward(ad_, hd, indptr, cols)

    def grad(g):
        return _kernels.csr_aggregate_backward(np.ascontiguousarray(g), ad_, hd, indptr, cols)

    return _result("segment_aggregate", out, (alpha, h), grad)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - np.max(x, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    s = np.exp(y)
    return _result("log_softmax", y, (a,),
                   lambda g: (g - s * np.sum(g, axis=axis, keepdims=True),))


# ---------------------------------------------------------------- backward


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: List[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: List[Tensor] = []
        seen = set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> Tape:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Gradients are overwritten, not accumulated across calls.
    """
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape.from_output(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            g = np.zeros_like(node.data)
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, Tensor], grads: Dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update, replacing each parameter's array."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.data.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst: str
    checked: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-7,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``f`` re-evaluates the scalar loss from the current values of ``params``.
    The relative error per coordinate is ``|a - n| / max(|a| + |n|, floor)``.
    ``max_coords`` samples that many coordinates per parameter instead of all.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst_err, worst_at, checked = 0.0, "", 0
    for k, (p, ga) in enumerate(zip(params, analytic)):
        coords = list(np.ndindex(*p.shape)) if p.data.ndim else [()]
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for c in coords:
            orig = p.data[c].copy()
            p.data = p.data.copy()
            p.data[c] = orig + h
            fp = f().item()
            p.data[c] = orig - h
            fm = f().item()
            p.data[c] = orig
            num = (fp - fm) / (2.0 * h)
            a = float(ga[c])
            err = abs(a - num) / max(abs(a) + abs(num), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst_at = err, f"{p.name or k}{list(c)}: analytic={a!r} numeric={num!r}"
    return GradCheckReport(worst_err, tol, worst_at, checked)
