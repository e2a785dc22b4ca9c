"""Reverse-mode automatic differentiation over dense float64 arrays.

Every op records its inputs and a vector-Jacobian product written in terms of
other ops. Running the backward pass with ``create_graph=True`` therefore
records the backward computation itself, so the returned gradients can be
differentiated again. That is all the bi-level meta-training needs.

Broadcasting is deliberately narrow: equal shapes, a size-1 operand against
anything, or a ``(1, n)`` row against a ``(B, n)`` batch. Anything else has to
go through :func:`expand` explicitly.
"""

from __future__ import annotations

import itertools
import threading
from collections.abc import Callable, Iterable, Iterator, Sequence
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, DomainError

_ids = itertools.count()


class _GradMode(threading.local):
    enabled = True


_state = _GradMode()


def is_grad_enabled() -> bool:
    return _state.enabled


@contextmanager
def no_grad() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense float64 array plus an optional link into the recorded graph."""

    __slots__ = ("_id", "_parents", "_vjp", "data", "requires_grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    # data is already a float64 ndarray here, so skip the constructor's coercion
    out = Tensor.__new__(Tensor)
    out.data = data
    out._id = next(_ids)
    out.requires_grad = False
    out._parents = ()
    out._vjp = None
    if _state.enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                out._parents = parents
                out._vjp = vjp
                break
    return out


# ----------------------------------------------------------------------------
# shape plumbing


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> tuple[int, ...]:
    if a == b:
        return a
    na, nb = int(np.prod(a)), int(np.prod(b))
    if na == 1 and len(a) <= len(b):
        return b
    if nb == 1 and len(b) <= len(a):
        return a
    if len(a) == 2 and len(b) == 2 and a[1] == b[1]:
        if a[0] == 1:
            return b
        if b[0] == 1:
            return a
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def sum_to(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``t`` down to ``shape``; the adjoint of :func:`expand`."""
    if t.shape == shape:
        return t
    if int(np.prod(shape)) == 1:
        data = t.data.sum().reshape(shape)
    elif len(shape) == 2 and shape[0] == 1 and t.data.ndim == 2 and t.shape[1] == shape[1]:
        data = t.data.sum(axis=0, keepdims=True)
    elif len(shape) == 2 and shape[1] == 1 and t.data.ndim == 2 and t.shape[0] == shape[0]:
        data = t.data.sum(axis=1, keepdims=True)
    else:
        raise DimensionError(f"cannot sum shape {t.shape} down to {shape}")
    src = t.shape

    def vjp(g, needs):
        return (expand(g, src),)

    return _node(data, (t,), vjp)


def expand(t: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Broadcast ``t`` to ``shape`` (size-1, row or column sources only)."""
    shape = tuple(shape)
    if t.shape == shape:
        return t
    ok = t.size == 1 or (
        len(shape) == 2
        and len(t.shape) == 2
        and ((t.shape[0] == 1 and t.shape[1] == shape[1]) or (t.shape[1] == 1 and t.shape[0] == shape[0]))
    )
    if not ok:
        raise DimensionError(f"cannot expand shape {t.shape} to {shape}")
    if t.size == 1:
        data = np.full(shape, t.data.reshape(-1)[0])
    else:
        data = np.broadcast_to(t.data, shape).copy()
    src = t.shape

    def vjp(g, needs):
        return (sum_to(g, src),)

    return _node(data, (t,), vjp)


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (sum_to(g, sa) if needs[0] else None, sum_to(g, sb) if needs[1] else None)

    return _node((a.data + b.data).reshape(shape), (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (sum_to(g, sa) if needs[0] else None, sum_to(neg(g), sb) if needs[1] else None)

    return _node((a.data - b.data).reshape(shape), (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape, "mul")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        return (
            sum_to(mul(g, b), sa) if needs[0] else None,
            sum_to(mul(g, a), sb) if needs[1] else None,
        )

    return _node((a.data * b.data).reshape(shape), (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    sa, sb = a.shape, b.shape

    def vjp(g, needs):
        ga = sum_to(div(g, b), sa) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), square(b))), sb) if needs[1] else None
        return ga, gb

    return _node((a.data / b.data).reshape(shape), (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (neg(g),)

    return _node(-a.data, (a,), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain constant."""
    a = as_tensor(a)
    c = float(c)

    def vjp(g, needs):
        return (scale(g, c),)

    return _node(a.data * c, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is taken as 0
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp(g, needs):
        return (mul(g, Tensor(mask)),)

    return _node(a.data * mask, (a,), vjp)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, float(slope))

    def vjp(g, needs):
        return (mul(g, Tensor(factor)),)

    return _node(a.data * factor, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, exp(a)),)

    return _node(np.exp(a.data), (a,), vjp)


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")

    def vjp(g, needs):
        return (div(g, a),)

    return _node(np.log(a.data), (a,), vjp)


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def vjp(g, needs):
        return (mul(g, scale(a, 2.0)),)

    return _node(a.data * a.data, (a,), vjp)


# ----------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g, needs):
        return (
            matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None,
        )

    return _node(a.data @ b.data, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {a.shape}")

    def vjp(g, needs):
        return (transpose(g),)

    return _node(np.ascontiguousarray(a.data.T), (a,), vjp)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def vjp(g, needs):
        return (reshape(g, src),)

    return _node(data, (a,), vjp)


def _check_axis(t: Tensor, axis: int | None) -> None:
    if axis is not None and not -t.data.ndim <= axis < t.data.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {t.shape}")


def sum(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    src = t.shape
    data = t.data.sum(axis=axis, keepdims=keepdims)
    kept = t.data.sum(axis=axis, keepdims=True).shape

    def vjp(g, needs):
        return (expand(reshape(g, kept), src),)

    return _node(np.asarray(data), (t,), vjp)


def mean(t: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    t = as_tensor(t)
    _check_axis(t, axis)
    n = t.size if axis is None else t.shape[axis]
    return scale(sum(t, axis=axis, keepdims=keepdims), 1.0 / n)


def take(t: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis`` of a matrix."""
    t = as_tensor(t)
    _check_axis(t, axis)
    axis = axis % t.data.ndim
    src = t.shape

    def vjp(g, needs):
        return (_place(g, src, start, stop, axis),)

    return _node(t.data[_index(t.data.ndim, start, stop, axis)].copy(), (t,), vjp)


def _index(ndim: int, start: int, stop: int, axis: int) -> tuple:
    idx = [slice(None)] * ndim
    idx[axis] = slice(start, stop)
    return tuple(idx)


def _place(g: Tensor, shape: tuple[int, ...], start: int, stop: int, axis: int) -> Tensor:
    """Adjoint of :func:`take`: write ``g`` into a zero array at the slice."""
    data = np.zeros(shape)
    data[_index(len(shape), start, stop, axis)] = g.data

    def vjp(h, needs):
        return (take(h, start, stop, axis),)

    return _node(data, (g,), vjp)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of nothing")
    nd = parts[0].data.ndim
    for p in parts:
        _check_axis(p, axis)
        if p.data.ndim != nd:
            raise DimensionError("concat: rank mismatch")
    ax = axis % nd
    for p in parts[1:]:
        if tuple(s for i, s in enumerate(p.shape) if i != ax) != tuple(
            s for i, s in enumerate(parts[0].shape) if i != ax
        ):
            raise DimensionError(f"concat: shapes {parts[0].shape} and {p.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g, needs):
        return tuple(
            take(g, int(bounds[i]), int(bounds[i + 1]), ax) if needs[i] else None for i in range(len(parts))
        )

    return _node(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), vjp)


# ----------------------------------------------------------------------------
# softmax family and losses


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax of a ``(B, N)`` matrix."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax expects (B, N), got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g, needs):
        p = softmax(logits)
        inner = sum(mul(g, p), axis=1, keepdims=True)
        return (mul(p, sub(g, expand(inner, p.shape))),)

    return _node(s, (logits,), vjp)


def _check_labels(labels, b: int, n: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.shape != (b,) or not np.issubdtype(lab.dtype, np.integer):
        raise DimensionError(f"labels must be {b} integers, got shape {lab.shape}")
    if np.any(lab < 0) or np.any(lab >= n):
        raise DomainError(f"labels must lie in [0, {n})")
    return lab


def softmax_ce(logits: Tensor, labels, per_example: bool = False) -> Tensor:
    """Negative log-softmax of the true class, averaged or as a ``(B, 1)`` column."""
    logits = as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"softmax_ce expects (B, N) logits, got {logits.shape}")
    b, n = logits.shape
    lab = _check_labels(labels, b, n)
    onehot = np.zeros((b, n))
    onehot[np.arange(b), lab] = 1.0
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    losses = lse - z[np.arange(b), lab][:, None]

    def vjp(g, needs):
        diff = sub(softmax(logits), Tensor(onehot))
        if per_example:
            return (mul(diff, expand(g, diff.shape)),)
        return (mul(diff, scale(g, 1.0 / b)),)

    data = losses if per_example else np.asarray(losses.mean())
    return _node(data, (logits,), vjp)


def mse(pred: Tensor, target, per_example: bool = False) -> Tensor:
    """Mean squared error; ``per_example`` gives row means as a ``(B, 1)`` column."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    sq = square(sub(pred, target))
    if per_example:
        if sq.data.ndim != 2:
            raise DimensionError("per-example mse needs (B, N) inputs")
        return mean(sq, axis=1, keepdims=True)
    return mean(sq)


def entropy(probs: Tensor) -> Tensor:
    """Row entropy ``-sum p log p`` of a ``(B, N)`` probability matrix, as ``(B, 1)``."""
    probs = as_tensor(probs)
    if probs.data.ndim != 2:
        raise DimensionError(f"entropy expects (B, N), got {probs.shape}")
    p = probs.data
    if np.any(p < 0):
        raise DomainError("entropy: negative probability")
    mask = (p > 0).astype(np.float64)
    safe = np.where(p > 0, p, 1.0)
    data = -(p * np.log(safe)).sum(axis=1, keepdims=True)

    def vjp(g, needs):
        # 0 log 0 := 0, so zero entries carry no gradient
        m = Tensor(mask)
        logp = log(add(mul(probs, m), Tensor(1.0 - mask)))
        d = neg(mul(add(logp, 1.0), m))
        return (mul(d, expand(g, d.shape)),)

    return _node(data, (probs,), vjp)


# ----------------------------------------------------------------------------
# backward pass


def _collect(root: Tensor, floor: int) -> list[Tensor]:
    """Graph nodes reachable from ``root`` created no earlier than ``floor``."""
    seen: dict[int, Tensor] = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in seen or t._id < floor:
            continue
        seen[t._id] = t
        for p in t._parents:
            if p.requires_grad and p._id not in seen:
                stack.append(p)
    return sorted(seen.values(), key=lambda t: t._id)


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a one-element ``output`` with respect to each tensor in ``wrt``.

    Tensors ``output`` does not depend on get zeros. With ``create_graph`` the
    results are graph nodes and can be differentiated again.
    """
    if output.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    wrt = list(wrt)
    if not output.requires_grad or not wrt:
        return [Tensor(np.zeros(w.shape)) for w in wrt]

    floor = min(w._id for w in wrt)
    nodes = _collect(output, floor)
    targets = {w._id for w in wrt}
    live: set[int] = set(targets)
    for t in nodes:
        if t._id not in live:
            for p in t._parents:
                if p._id in live:
                    live.add(t._id)
                    break

    grads: dict[int, Tensor] = {output._id: Tensor(np.ones(output.shape))}
    ctx = _enabled() if create_graph else no_grad()
    with ctx:
        for t in reversed(nodes):
            g = grads.get(t._id)
            if g is None or t._vjp is None or t._id not in live:
                continue
            needs = tuple(p.requires_grad and p._id in live for p in t._parents)
            if not any(needs):
                continue
            for p, gp in zip(t._parents, t._vjp(g, needs)):
                if gp is None:
                    continue
                prev = grads.get(p._id)
                grads[p._id] = gp if prev is None else add(prev, gp)

    out = []
    for w in wrt:
        g = grads.get(w._id)
        if g is None:
            out.append(Tensor(np.zeros(w.shape)))
        else:
            out.append(g if create_graph else Tensor(g.data))
    return out


def backward(output: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> dict[Tensor, Tensor]:
    """Like :func:`grad` but returns a map from each parameter to its gradient."""
    wrt = list(wrt)
    return dict(zip(wrt, grad(output, wrt, create_graph=create_graph)))


@contextmanager
def _enabled() -> Iterator[None]:
    prev = is_grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev
