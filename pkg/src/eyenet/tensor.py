"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every forward op returns a new :class:`Tensor`. When any input requires a
gradient, the result keeps references to its inputs and a closure mapping the
output gradient to input gradients. :func:`backward` orders the reachable
graph into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

from .errors import InvalidArgument, NumericalError, ShapeError


class _State(threading.local):
    """Per-thread switches, so concurrent inference contexts don't interfere."""

    grad_enabled = True
    branch_log = None


_state = _State()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference, finite differences)."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def record_branches() -> Iterator[list[str]]:
    """Fingerprint every piecewise branch taken inside the block.

    Yields a list that receives one hex digest on exit. Two evaluations with
    equal digests took the same ReLU masks and sort orders, so the function is
    smooth on the segment between them.
    """
    prev = _state.branch_log
    log = _state.branch_log = hashlib.sha256()
    result: list[str] = []
    try:
        yield result
    finally:
        result.append(log.hexdigest())
        _state.branch_log = prev


def note_branch(decision: np.ndarray) -> None:
    """Record a discrete decision (mask, permutation) when fingerprinting is on."""
    if _state.branch_log is not None:
        _state.branch_log.update(np.ascontiguousarray(decision).tobytes())


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    track = _state.grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out.parents = parents if track else ()
    out.backward_fn = backward_fn if track else None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (a, b) in enumerate(zip(g.shape, shape)) if b == 1 and a != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _check_axis(t: Tensor, axis: int, op: str) -> int:
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for rank {t.ndim}")
    return axis % t.ndim


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise NumericalError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, "div", (a, b), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    out = np.where(mask, x.data, 0.0)
    return _result(out, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericalError("log: non-positive input")
    return _result(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "softmax")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (x,), bw)


# --------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    if axis is not None:
        axis = _check_axis(x, axis, "sum")
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), "sum", (x,), bw)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    if axis is not None:
        axis = _check_axis(x, axis, "mean")
    count = x.data.size if axis is None else x.shape[axis]
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _result(np.asarray(out, dtype=np.float64), "mean", (x,), bw)


# --------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and a matrix ``b`` of shape (k, n).

    Leading axes of ``a`` are flattened so every point row shares ``b``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

    def bw(g):
        g2 = g.reshape(-1, n)
        return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

    return _result(out, "matmul", (a, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors")
    axis = _check_axis(tensors[0], axis, "concat")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, "concat", tuple(tensors), bw)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = _check_axis(x, axis, "slice")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    out = x.data[index].copy()

    def bw(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return _result(out, "slice", (x,), bw)


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    axis = _check_axis(x, axis, "split")
    if int(np.sum(sizes)) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover extent {x.shape[axis]}")
    parts, start = [], 0
    for size in sizes:
        parts.append(slice_axis(x, start, start + size, axis))
        start += size
    return parts


def _check_indices(idx: np.ndarray, n: int, op: str) -> np.ndarray:
    idx = np.asarray(idx)
    if idx.size and not np.issubdtype(idx.dtype, np.integer):
        raise IndexError(f"{op}: indices must be integers, got {idx.dtype}")
    idx = idx.astype(np.intp, copy=False)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"{op}: index out of range for {n} rows")
    return idx


def gather_rows(x: Tensor, indices) -> Tensor:
    """Rows ``x[indices]``; ``indices`` may have any shape."""
    idx = _check_indices(indices, x.shape[0], "gather_rows")
    out = x.data[idx]
    row_shape = x.shape[1:]

    def bw(g):
        full = np.zeros(x.shape)
        np.add.at(full, idx.reshape(-1), g.reshape((-1,) + row_shape))
        return (full,)

    return _result(out, "gather_rows", (x,), bw)


def scatter_add_rows(x: Tensor, indices, rows: Tensor) -> Tensor:
    """Copy of ``x`` with ``rows[j]`` added into row ``indices[j]``."""
    idx = _check_indices(indices, x.shape[0], "scatter_add_rows")
    rows = as_tensor(rows)
    if rows.shape != idx.shape + x.shape[1:]:
        raise ShapeError(f"scatter_add_rows: rows {rows.shape} do not match indices {idx.shape}")
    out = x.data.copy()
    np.add.at(out, idx, rows.data)
    return _result(out, "scatter_add_rows", (x, rows), lambda g: (g, g[idx]))


# --------------------------------------------------------------------------
# tape


class Tape:
    """Operations reachable from an output, in topological order (inputs first)."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record(cls, output: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, output: Tensor, seed: np.ndarray) -> None:
        output.grad = seed if output.grad is None else output.grad + seed
        for node in reversed(self.nodes):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def backward(loss: Tensor, params: "ParamRegistry | None" = None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor.

    When ``params`` is given, registered tensors the loss does not reach get
    zero gradients so optimizers always see a full set.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidArgument("backward: loss does not depend on any tensor requiring grad")
    tape = Tape.record(loss)
    tape.replay(loss, np.ones_like(loss.data))
    if params is not None:
        for t in params.values():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)


# --------------------------------------------------------------------------
# parameters


class ParamRegistry:
    """Ordered name -> learnable tensor map."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def values(self):
        return self._params.values()

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self._params.values()], dtype=np.int64))

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) ^ set(state)
        if missing:
            raise InvalidArgument(f"parameter sets differ: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"{k}: stored shape {arr.shape} != {t.shape}")
            t.data = arr.copy()


# --------------------------------------------------------------------------
# finite differences


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                     kink_safe: bool = False, min_eps: float = 1e-8) -> np.ndarray:
    """Central differences of sum(f(x)) at ``x``, one coordinate at a time.

    When ``f`` returns per-term contributions rather than a scalar, the two
    evaluations are differenced term by term before summing, so rounding in
    terms the coordinate does not touch cancels exactly.

    With ``kink_safe``, a step whose endpoints take different piecewise
    branches than ``x`` (see ``record_branches``) straddles a kink; it is
    shrunk tenfold until both endpoints match, down to ``min_eps``.
    """
    flat = x.data.reshape(-1)
    out = np.empty(flat.size)

    def evaluate():
        if not kink_safe:
            return f(x).data, None
        with record_branches() as sig:
            val = f(x).data
        return val, sig[0]

    with no_grad():
        base = evaluate()[1]
        for i in range(flat.size):
            orig = flat[i]
            h = eps
            while True:
                flat[i] = orig + h
                fp, sp = evaluate()
                flat[i] = orig - h
                fm, sm = evaluate()
                flat[i] = orig
                if sp == base and sm == base or h / 10 < min_eps:
                    break
                h /= 10
            if not (np.isfinite(fp).all() and np.isfinite(fm).all()):
                raise NumericalError(f"f is non-finite near coordinate {i}")
            out[i] = float(np.sum(fp - fm)) / (2.0 * h)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def _objective(out: Tensor) -> Tensor:
    if not np.isfinite(out.data).all():
        raise NumericalError("f returned a non-finite value")
    return out if out.data.size == 1 and out.ndim <= 1 else sum(out)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max per-coordinate relative error between tape and central-difference gradients.

    ``f`` may return a scalar or a tensor of terms whose sum is the objective.
    """
    if not x.requires_grad:
        raise InvalidArgument("finite_diff_check: x must require grad")
    x.grad = None
    backward(_objective(f(x)))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = numeric_gradient(f, x, eps)
    return float(relative_error(analytic, numeric).max()) if x.data.size else 0.0


def check_param_gradients(f: Callable[[], Tensor], params: "ParamRegistry",
                          eps: float = 1e-5, kink_safe: bool = True) -> dict[str, float]:
    """Max relative error per registered tensor for the objective sum(f())."""
    params.zero_grad()
    backward(_objective(f()), params)
    report = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        numeric = numeric_gradient(lambda _: f(), p, eps, kink_safe)
        report[name] = float(relative_error(analytic, numeric).max()) if p.data.size else 0.0
    params.zero_grad()
    return report
