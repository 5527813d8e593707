"""Dense tensor with a reverse-mode gradient tape.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
``backward`` replays those closures in exact reverse construction order.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

_DTYPE = np.float32
_GRAD_ENABLED = True
_node_ids = itertools.count()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""

    def __init__(self, op: str, where: str = "forward"):
        super().__init__(f"non-finite values produced by '{op}' ({where})")
        self.op = op
        self.where = where


class GraphError(RuntimeError):
    """Misuse of the gradient tape (reused graph, stale gradients, non-scalar loss)."""


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the working float type, e.g. ``precision(np.float64)``
    for gradient checks. Tensors created inside use the new type."""
    global _DTYPE
    prev = _DTYPE
    _DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str, where: str = "forward") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(op, where)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """N-D float array that can take part in automatic differentiation.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op", "_id",
                 "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=_DTYPE)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None
        self._op = "leaf"
        self._id = next(_node_ids)
        self._consumed = False

    # construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn,
                 op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        # scalars (losses) keep 64-bit so their rounding does not swamp small changes
        keep = data.dtype == _DTYPE or (data.ndim == 0 and data.dtype == np.float64)
        out.data = data if keep else data.astype(_DTYPE)
        out.grad = None
        out.name = None
        out._id = next(_node_ids)
        out._consumed = False
        out._op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # reverse pass ---------------------------------------------------------

    def backward(self, accumulate: bool = False) -> None:
        """Populate ``.grad`` on every ``requires_grad`` leaf reachable from this
        scalar. The graph is released afterwards; calling again raises."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad and not self._consumed:
            raise GraphError("loss does not depend on any tensor requiring grad")

        nodes = {}
        stack = [self]
        while stack:
            t = stack.pop()
            if t._id in nodes:
                continue
            if t._consumed:
                raise GraphError("graph already consumed by a previous backward call")
            nodes[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda t: t._id, reverse=True)

        if not accumulate:
            stale = [t for t in order if t._backward is None and t.grad is not None]
            if stale:
                raise GraphError("leaf gradients from a previous backward were not reset "
                                 "(call zero_grad or pass accumulate=True)")

        grads = {self._id: np.ones_like(self.data)}
        for t in order:
            g = grads.pop(t._id, None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            parent_grads = t._backward(g)
            for p, pg in zip(t._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, t._op, "backward")
                if pg.dtype != p.data.dtype:
                    pg = pg.astype(p.data.dtype)
                if p._id in grads:
                    grads[p._id] = grads[p._id] + pg
                else:
                    grads[p._id] = pg
            t._consumed = True
            t._parents = ()
            t._backward = None
        self._consumed = True

    # elementwise arithmetic -----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)), "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._from_op(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)), "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b, (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._from_op(
            out, (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)), "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent: float) -> "Tensor":
        if isinstance(exponent, Tensor):
            raise TypeError("only scalar exponents are supported")
        a = self.data
        return Tensor._from_op(
            a ** exponent, (self,), lambda g: (g * exponent * a ** (exponent - 1),), "pow")

    def sqrt(self) -> "Tensor":
        with np.errstate(invalid="ignore"):
            out = np.sqrt(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        a = self.data
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.log(a)
        return Tensor._from_op(out, (self,), lambda g: (g / a,), "log")

    # reductions and shape ---------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        full = axis is None and not keepdims
        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64 if full else None))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(out, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,),
                               lambda g: (g.reshape(src),), "reshape")

    def __getitem__(self, idx) -> "Tensor":
        src_shape = self.shape

        def backward(g):
            full = np.zeros(src_shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return Tensor._from_op(np.ascontiguousarray(self.data[idx]), (self,), backward, "slice")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)
