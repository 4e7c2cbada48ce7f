"""Dense float64 tensors with reverse-mode automatic differentiation.

The computation graph is recorded implicitly: every operation touching a
tensor that requires gradients stores its parent tensors plus a closure
computing the vector-Jacobian products. ``Tensor.backward()`` materializes
the tape (topological order of the recorded operations) and replays the
closures in exact reverse order, once. Calling ``backward`` a second time
on the same output is an error.

Everything is float64. Integer data (token ids, gather indices) stays in
plain numpy arrays and enters operations as constants.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray

# When True, every operation validates that its output is finite and raises
# FloatingPointError otherwise. Off by default: the scan costs memory
# bandwidth. Training independently checks the loss each step.
CHECK_FINITE = False

_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph recording (evaluation passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _validate(data: Array) -> Array:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced by tensor operation")
    return data


class Tensor:
    """A dense float64 array with an optional gradient buffer.

    ``grad`` is populated only on leaf tensors (no parents) that have
    ``requires_grad`` set; gradients of interior nodes live only inside the
    backward traversal.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _validate(np.asarray(data, dtype=np.float64))
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[Array], tuple] | None = None
        self._done = False

    # -- graph bookkeeping -------------------------------------------------

    @classmethod
    def _from_op(cls, data: Array, parents: tuple["Tensor", ...], backward_fn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = _validate(data)
        out.grad = None
        out._done = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Run reverse-mode differentiation from this scalar output."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        if self._done:
            raise RuntimeError("backward already ran for this output; re-run the forward pass first")
        if not self.requires_grad:
            raise RuntimeError("output does not depend on any tensor requiring gradients")
        tape = build_tape(self)
        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is not None:
                for parent, pg in zip(node._parents, node._backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    held = grads.get(id(parent))
                    grads[id(parent)] = pg if held is None else held + pg
            elif node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
        self._done = True

    # -- conveniences --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def sum(self, axis=None, keepdims=False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def __repr__(self) -> str:
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flags})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the recorded operations reachable from ``root``.

    The list is topologically ordered: every tensor appears after all of its
    parents, so iterating it in reverse visits nodes in exact reverse
    topological order. Iterative traversal; graph depth is unbounded by the
    Python recursion limit.
    """
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- broadcasting helpers ----------------------------------------------------


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``g`` down to ``shape`` (reverses numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _split(other) -> tuple[Array, Tensor | None]:
    """Return (raw array, tensor-or-None) for a Tensor/array/scalar operand."""
    if isinstance(other, Tensor):
        return other.data, other
    return np.asarray(other, dtype=np.float64), None


# -- elementwise operations ---------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    bd, bt = _split(b)
    parents = (a, bt) if bt is not None else (a,)

    def backward(g: Array):
        ga = _unbroadcast(g, a.data.shape)
        if bt is None:
            return (ga,)
        return ga, _unbroadcast(g, bd.shape)

    return Tensor._from_op(a.data + bd, parents, backward)


def sub(a: Tensor, b) -> Tensor:
    bd, bt = _split(b)
    parents = (a, bt) if bt is not None else (a,)

    def backward(g: Array):
        ga = _unbroadcast(g, a.data.shape)
        if bt is None:
            return (ga,)
        return ga, _unbroadcast(-g, bd.shape)

    return Tensor._from_op(a.data - bd, parents, backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b) -> Tensor:
    bd, bt = _split(b)
    parents = (a, bt) if bt is not None else (a,)

    def backward(g: Array):
        ga = _unbroadcast(g * bd, a.data.shape)
        if bt is None:
            return (ga,)
        return ga, _unbroadcast(g * a.data, bd.shape)

    return Tensor._from_op(a.data * bd, parents, backward)


def div(a, b) -> Tensor:
    ad, at = _split(a)
    bd, bt = _split(b)
    parents = tuple(t for t in (at, bt) if t is not None)
    out = ad / bd

    def backward(g: Array):
        grads = []
        if at is not None:
            grads.append(_unbroadcast(g / bd, ad.shape))
        if bt is not None:
            grads.append(_unbroadcast(-g * ad / (bd * bd), bd.shape))
        return tuple(grads)

    return Tensor._from_op(out, parents, backward)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data**p

    def backward(g: Array):
        return (g * p * a.data ** (p - 1.0),)

    return Tensor._from_op(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor._from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def _sigmoid(x: Array) -> Array:
    # exp(-|x|) never overflows; the two branches share it.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(a: Tensor) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    s = _sigmoid(a.data)
    out = a.data * s

    def backward(g: Array):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return Tensor._from_op(out, (a,), backward)


# -- reductions ----------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._from_op(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def backward(g: Array):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.data.shape).copy(),)

    return Tensor._from_op(out, (a,), backward)


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b) -> Tensor:
    bd, bt = _split(b)
    if a.data.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul requires operands with at least 2 dimensions")
    if a.data.shape[-1] != bd.shape[-2]:
        raise ValueError(
            f"matmul: inner dimensions differ, {a.data.shape} x {bd.shape}"
        )
    parents = (a, bt) if bt is not None else (a,)

    def backward(g: Array):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.data.shape)
        if bt is None:
            return (ga,)
        return ga, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, bd.shape)

    return Tensor._from_op(a.data @ bd, parents, backward)


# -- softmax family --------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    if a.data.shape[axis] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise ValueError("log_softmax over an empty axis")
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g: Array):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), backward)


# -- normalization ------------------------------------------------------------------


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * weight, normalizing the last axis."""
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    return mul(div(x, power(add(ms, eps), 0.5)), weight)


# -- shape manipulation ---------------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return Tensor._from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),)
    )


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return Tensor._from_op(
        np.ascontiguousarray(np.swapaxes(a.data, i, j)),
        (a,),
        lambda g: (np.swapaxes(g, i, j),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g: Array):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._from_op(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward
    )


def tslice(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing; use ``take`` for index arrays."""

    def backward(g: Array):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return Tensor._from_op(a.data[key].copy(), (a,), backward)


# -- gather / scatter -------------------------------------------------------------------


def take(a: Tensor, idx: Array, axis: int = 0) -> Tensor:
    """Select ``idx`` (1-D int array, repeats allowed) along ``axis``."""
    idx = np.asarray(idx)
    out = np.take(a.data, idx, axis=axis)
    ax = axis if axis >= 0 else a.data.ndim + axis
    key = (slice(None),) * ax + (idx,)
    # Scatter-add is only needed when an index repeats; plain assignment is
    # much cheaper and covers the common unique-index gathers.
    unique = len(np.unique(idx)) == idx.size

    def backward(g: Array):
        full = np.zeros_like(a.data)
        if unique:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return Tensor._from_op(out, (a,), backward)


def take_pairs(a: Tensor, idx: Array) -> Tensor:
    """Pick a[i, idx[i]] for each row i of a 2-D tensor."""
    idx = np.asarray(idx)
    rows = np.arange(a.data.shape[0])
    out = a.data[rows, idx]

    def backward(g: Array):
        full = np.zeros_like(a.data)
        np.add.at(full, (rows, idx), g)
        return (full,)

    return Tensor._from_op(out, (a,), backward)


def scatter_rows(a: Tensor, idx: Array, n_rows: int) -> Tensor:
    """Place rows of ``a`` at positions ``idx`` (unique) of a zero tensor."""
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + a.data.shape[1:], dtype=np.float64)
    out[idx] = a.data

    def backward(g: Array):
        return (g[idx],)

    return Tensor._from_op(out, (a,), backward)


def scatter_cols(a: Tensor, idx: Array, width: int) -> Tensor:
    """Place last-axis entries of ``a`` at columns ``idx`` (unique) of width ``width``."""
    idx = np.asarray(idx)
    out = np.zeros(a.data.shape[:-1] + (width,), dtype=np.float64)
    out[..., idx] = a.data

    def backward(g: Array):
        return (g[..., idx],)

    return Tensor._from_op(out, (a,), backward)
