"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small: enough for MLPs, diagonal Gaussians,
masked losses and sparse row selection. Broadcasting is restricted to
scalar-with-tensor and equal shapes; anything richer has to be written
out explicitly by the caller. All storage is 64-bit, row-major.

Graphs live for one forward/backward pass: ops record closures on the
output node, ``backward`` walks them in reverse topological order, and
the interior nodes are dropped when the caller releases the loss tensor.
Leaf tensors (parameters) persist across steps and accumulate into
``grad`` until it is cleared.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DomainError, ShapeError


class Tensor:
    """A node in the differentiation graph wrapping a float64 ndarray."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward", "_row_buffer", "_row_buffer_rows")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._row_buffer = None
        self._row_buffer_rows = None

    @classmethod
    def _from_op(cls, values: np.ndarray, parents, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._row_buffer = None
        out._row_buffer_rows = None
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            # constant subgraphs are not recorded
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.values.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.values.shape:
            # gradient of a scalar operand broadcast against a tensor
            g = np.asarray(g.sum()).reshape(self.values.shape)
        if self.grad is None:
            self.grad = np.array(g)  # own a copy; incoming buffers may be shared
        else:
            self.grad += g

    def _accumulate_owned(self, g: np.ndarray) -> None:
        # like _accumulate, but the caller donates a freshly built array
        if self.grad is None and g.shape == self.values.shape:
            self.grad = g
        else:
            self._accumulate(g)

    def _accumulate_rows(self, rows: np.ndarray, g: np.ndarray, unique: bool) -> None:
        """Scatter-add into selected rows; untouched rows stay exactly zero.

        For the common case (no grad yet, unique rows) a persistent
        buffer is reused: only the rows written last time are cleared, so
        the cost scales with the batch instead of the full parameter.
        """
        if self.grad is None and unique:
            buf = self._row_buffer
            if buf is None:
                buf = np.zeros_like(self.values)
                self._row_buffer = buf
            elif self._row_buffer_rows is not None:
                buf[self._row_buffer_rows] = 0.0
            buf[rows] = g
            self._row_buffer_rows = rows
            self.grad = buf
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        if unique:
            self.grad[rows] += g
        else:
            np.add.at(self.grad, rows, g)
        if self.grad is self._row_buffer:
            # keep the zero-except-recorded-rows invariant across extra gathers
            self._row_buffer_rows = np.concatenate([self._row_buffer_rows, rows])

    def backward(self) -> None:
        backward(self)

    # reductions and elementwise ops as method sugar
    def sum(self, axes=None) -> "Tensor":
        return reduce_sum(self, axes)

    def mean(self, axes=None) -> "Tensor":
        return reduce_mean(self, axes)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def relu(self) -> "Tensor":
        return relu(self)

    def square(self) -> "Tensor":
        return square(self)

    def abs(self) -> "Tensor":
        return absolute(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.values.shape == b.values.shape:
        return
    if a.values.size == 1 or b.values.size == 1:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.values.shape} and {b.values.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")

    def back(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor._from_op(a.values + b.values, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")

    def back(g):
        a._accumulate(g)
        b._accumulate_owned(-g)

    return Tensor._from_op(a.values - b.values, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")

    def back(g):
        a._accumulate_owned(g * b.values)
        b._accumulate_owned(g * a.values)

    return Tensor._from_op(a.values * b.values, (a, b), back)


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors; gradients flow to both operands."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.values.shape} and {b.values.shape}")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for {a.values.shape} and {b.values.shape}")

    def back(g):
        a._accumulate_owned(g @ b.values.T)
        b._accumulate_owned(a.values.T @ g)

    return Tensor._from_op(a.values @ b.values, (a, b), back)


def exp(t) -> Tensor:
    t = _as_tensor(t)
    out_values = np.exp(t.values)

    def back(g):
        t._accumulate_owned(g * out_values)

    return Tensor._from_op(out_values, (t,), back)


def log(t) -> Tensor:
    t = _as_tensor(t)
    if np.any(t.values < 0.0):
        raise DomainError("log of negative input")

    def back(g):
        t._accumulate_owned(g / t.values)

    return Tensor._from_op(np.log(t.values), (t,), back)


def relu(t) -> Tensor:
    t = _as_tensor(t)

    def back(g):
        # subgradient at exactly 0 is 0
        t._accumulate_owned(g * (t.values > 0.0))

    return Tensor._from_op(np.maximum(t.values, 0.0), (t,), back)


def square(t) -> Tensor:
    t = _as_tensor(t)

    def back(g):
        t._accumulate_owned(g * (2.0 * t.values))

    return Tensor._from_op(t.values * t.values, (t,), back)


def absolute(t) -> Tensor:
    t = _as_tensor(t)

    def back(g):
        t._accumulate_owned(g * np.sign(t.values))

    return Tensor._from_op(np.abs(t.values), (t,), back)


def sqrt(t) -> Tensor:
    t = _as_tensor(t)
    if np.any(t.values < 0.0):
        raise DomainError("sqrt of negative input")
    out_values = np.sqrt(t.values)

    def back(g):
        t._accumulate_owned(g * (0.5 / out_values))

    return Tensor._from_op(out_values, (t,), back)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "exp": exp,
    "log": log,
    "relu": relu,
    "square": square,
    "abs": absolute,
    "sqrt": sqrt,
}


def elementwise(op: str, *inputs) -> Tensor:
    """Dispatch an elementwise op by name (unary or binary)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ShapeError(f"unknown elementwise op {op!r}") from None
    return fn(*inputs)


def _normalize_axes(axes, ndim: int):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(int(ax) for ax in axes)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for rank-{ndim} tensor")
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes {axes}")
    return axes


def _spread(g: np.ndarray, in_shape, axes) -> np.ndarray:
    # broadcast a reduced gradient back over the reduced axes
    if axes is None:
        return np.full(in_shape, float(g), dtype=np.float64)
    expanded = np.expand_dims(g, axes)
    return np.broadcast_to(expanded, in_shape).copy()


def reduce_sum(t, axes=None) -> Tensor:
    t = _as_tensor(t)
    axes = _normalize_axes(axes, t.values.ndim)
    in_shape = t.values.shape

    def back(g):
        t._accumulate_owned(_spread(g, in_shape, axes))

    return Tensor._from_op(np.sum(t.values, axis=axes), (t,), back)


def reduce_mean(t, axes=None) -> Tensor:
    t = _as_tensor(t)
    axes = _normalize_axes(axes, t.values.ndim)
    in_shape = t.values.shape
    if axes is None:
        count = t.values.size
    else:
        count = 1
        for ax in axes:
            count *= in_shape[ax]

    def back(g):
        t._accumulate_owned(_spread(g, in_shape, axes) / count)

    return Tensor._from_op(np.mean(t.values, axis=axes), (t,), back)


def reduce(op: str, t, axes=None) -> Tensor:
    """Dispatch a reduction by name: sum or mean."""
    if op == "sum":
        return reduce_sum(t, axes)
    if op == "mean":
        return reduce_mean(t, axes)
    raise ShapeError(f"unknown reduction {op!r}")


def gather_rows(t, indices) -> Tensor:
    """Select rows of a rank-2 tensor; backward scatter-adds only into selected rows."""
    t = _as_tensor(t)
    if t.values.ndim != 2:
        raise ShapeError(f"gather_rows needs a rank-2 tensor, got shape {t.values.shape}")
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    n_rows = t.values.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"gather_rows index out of range [0, {n_rows})")
    unique = np.unique(idx).size == idx.size

    def back(g):
        t._accumulate_rows(idx, g, unique)

    return Tensor._from_op(t.values[idx], (t,), back)


def backward(root: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar root.

    Repeated calls without clearing grads accumulate.
    """
    if root.values.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.values.shape}")
    if not root.requires_grad:
        return

    # iterative postorder so deep graphs cannot hit the recursion limit
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    # interior grads are transient per pass; only leaves accumulate across calls
    for node in topo:
        if node._backward is not None:
            node.grad = None

    root._accumulate(np.ones_like(root.values))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)
