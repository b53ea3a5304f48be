"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients.  ``backward`` linearises the graph into a
:class:`Tape` (topological order) and walks it in reverse.

Broadcasting is deliberately absent: elementwise ops require equal shapes,
except that a 0-d tensor or a Python number may be combined with anything.
Use :func:`broadcast_to` when a row vector has to be spread over a matrix.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "record",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "concat",
    "stack_rows",
    "take_rows",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum",
    "mean",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "log",
    "exp",
    "softmax",
    "l2_normalize",
    "spmm",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ------------------------------------------------
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
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a Python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return _slice(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None) -> "Tensor":
        return sum(self, axis)

    def mean(self, axis=None) -> "Tensor":
        return mean(self, axis)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, np.ndarray):
        return Tensor(x)
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(float(x))
    raise TypeError(f"cannot combine Tensor with {type(x).__name__}")


def record(value: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``value`` as the output of an op.

    ``backward_fn(g)`` must return one gradient (or None) per parent.  The
    closure is kept only when graph recording is on and some parent needs a
    gradient; otherwise the result is a plain constant.
    """
    out = Tensor.__new__(Tensor)
    arr = np.asarray(value, dtype=np.float64)
    _check_finite(arr, op)
    out.data = arr
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Topologically ordered list of the nodes a scalar loss depends on."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_loss(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


# ---------------------------------------------------------------------------
# linear algebra and structure
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return record(ad @ bd, (a, b), _bw, "matmul")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    nd = ts[0].ndim
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]

    def _bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return record(np.concatenate([t.data for t in ts], axis=ax), ts, _bw, "concat")


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix."""
    return concat([reshape(t, (1, t.size)) for t in tensors], axis=0)


def _slice(a: Tensor, idx) -> Tensor:
    if not isinstance(idx, tuple):
        idx = (idx,)
    for part in idx:
        if not isinstance(part, (int, slice, np.integer)):
            raise TypeError("only basic int/slice indexing is supported; use take_rows for gathers")
    shape = a.shape

    def _bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return record(a.data[idx], (a,), _bw, "slice")


def take_rows(a: Tensor, rows) -> Tensor:
    """Gather rows of a matrix by integer index (repeats allowed)."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"take_rows needs a matrix, got shape {a.shape}")
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise IndexError(f"row index out of range for shape {a.shape}")
    shape = a.shape

    def _bw(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return record(a.data[rows], (a,), _bw, "take_rows")


def reshape(a: Tensor, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicitly tile ``a`` to ``shape`` (numpy rules, leading axes may be added)."""
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        value = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {a.shape} to {shape}") from exc
    old = a.shape
    lead = len(shape) - len(old)

    def _bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(old) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(old),)

    return record(value, (a,), _bw, "broadcast_to")


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    shape = a.shape

    def _bw(g):
        if axis is None:
            return (np.full(shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return record(a.data.sum(axis=axis), (a,), _bw, "sum")


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(sum(a, axis), 1.0 / n)


def spmm(matrix, x: Tensor) -> Tensor:
    """Constant (sparse or dense) matrix times a tensor."""
    x = _as_tensor(x)
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: inner dimensions differ, {matrix.shape} @ {x.shape}")
    mt = matrix.T
    value = np.asarray(matrix @ x.data)
    return record(value, (x,), lambda g: (np.asarray(mt @ g),), "spmm")


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------

def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and costs one ufunc pass
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _stable_sigmoid(a.data)
    return record(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return record(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    value = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    s = _stable_sigmoid(x)
    return record(value, (a,), lambda g: (g * s,), "softplus")


def log(a) -> Tensor:
    a = _as_tensor(a)
    if (a.data <= 0).any():
        raise DomainError("log of a non-positive value")
    x = a.data
    return record(np.log(x), (a,), lambda g: (g / x,), "log")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by the finiteness check
        e = np.exp(a.data)
    return record(e, (a,), lambda g: (g * e,), "exp")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record(s, (a,), _bw, "softmax")


def l2_normalize(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if (norm == 0).any():
        raise DomainError("l2_normalize of a zero-norm vector")
    y = a.data / norm

    def _bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return record(y, (a,), _bw, "l2_normalize")

