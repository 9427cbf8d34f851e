"""Dense arrays with define-by-run reverse-mode differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
A :class:`Tape` is the topologically ordered list of those operations for
one loss, rebuilt on every forward pass.

Broadcasting is deliberately limited to scalar-with-tensor; anything wider
goes through a named op such as :func:`add_bias`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64
MAX_RANK = 3


class NumericalError(FloatingPointError):
    """A forward or backward computation produced NaN or Inf."""


class ShapeError(ValueError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {where}")


class Tensor:
    """Rank <= 3 numeric array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- basic accessors -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def apply_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as the output of a differentiable op.

    ``backward_fn(grad_out)`` must return one gradient (or None) per parent.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    if data.ndim > MAX_RANK:
        raise ShapeError(f"{op} produced rank {data.ndim} output")
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _binary_operands(x, y):
    x = as_tensor(x)
    y = as_tensor(y, dtype=x.dtype)
    if x.shape != y.shape and x.size != 1 and y.size != 1:
        raise ShapeError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(x, y) -> Tensor:
    x, y = _binary_operands(x, y)
    xs, ys = x.shape, y.shape
    return apply_op(x.data + y.data, (x, y),
                    lambda g: (_unbroadcast(g, xs), _unbroadcast(g, ys)), "add")


def sub(x, y) -> Tensor:
    x, y = _binary_operands(x, y)
    xs, ys = x.shape, y.shape
    return apply_op(x.data - y.data, (x, y),
                    lambda g: (_unbroadcast(g, xs), _unbroadcast(-g, ys)), "sub")


def mul(x, y) -> Tensor:
    x, y = _binary_operands(x, y)
    xd, yd = x.data, y.data

    def bw(g):
        return _unbroadcast(g * yd, xd.shape), _unbroadcast(g * xd, yd.shape)

    return apply_op(xd * yd, (x, y), bw, "mul")


def neg(x) -> Tensor:
    x = as_tensor(x)
    return apply_op(-x.data, (x,), lambda g: (-g,), "neg")


def _sigmoid_np(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return apply_op(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return apply_op(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0.0).astype(x.dtype), (x,),
                    lambda g: (g * mask,), "relu")


def prelu(x, a) -> Tensor:
    """``x`` where positive, ``a*x`` otherwise; ``a`` is a scalar (tensor or float)."""
    x = as_tensor(x)
    a = as_tensor(a, dtype=x.dtype)
    if a.size != 1:
        raise ShapeError("prelu slope must be a scalar")
    xd = x.data
    neg_mask = xd <= 0
    av = a.data.reshape(-1)[0]
    out = np.where(neg_mask, av * xd, xd)

    def bw(g):
        gx = np.where(neg_mask, av * g, g)
        ga = np.asarray((g * xd * neg_mask).sum()).reshape(a.shape)
        return gx, ga

    return apply_op(out, (x, a), bw, "prelu")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, x, y=None, a=None) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, sigmoid, tanh, relu, prelu)."""
    if op_kind in _BINARY:
        if y is None:
            raise ValueError(f"{op_kind} needs a second operand")
        return _BINARY[op_kind](x, y)
    if op_kind in _UNARY:
        return _UNARY[op_kind](x)
    if op_kind == "prelu":
        return prelu(x, 0.25 if a is None else a)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra and reshaping
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return apply_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def add_bias(x, b) -> Tensor:
    """Add vector ``b`` along the last axis of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"bias {b.shape} does not fit {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return apply_op(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError("transpose expects a matrix")
    return apply_op(x.data.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return apply_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def tsum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return apply_op(np.asarray(x.data.sum()), (x,),
                    lambda g: (np.full(shape, g, dtype=x.dtype),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return apply_op(np.asarray(x.data.mean()), (x,),
                    lambda g: (np.full(shape, g / n, dtype=x.dtype),), "mean")


def take(x, idx) -> Tensor:
    """Numpy-style indexing; gradients scatter back with accumulation."""
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx,)

    return apply_op(np.array(x.data[idx]), (x,), bw, "take")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op(np.concatenate([t.data for t in xs], axis=axis), xs, bw, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return apply_op(np.stack([t.data for t in xs], axis=axis), xs, bw, "stack")


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

class Tape:
    """Operations reachable from ``loss`` in topological order (inputs first)."""

    def __init__(self, loss: Tensor):
        self.loss = loss
        self.records: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.records.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self) -> int:
        return len(self.records)

    def backward(self) -> list[Tensor]:
        """Propagate d(loss)/d(.) and accumulate into leaf ``grad`` slots.

        Returns the leaves that received a gradient.
        """
        loss = self.loss
        if loss.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        if not loss.requires_grad:
            raise ValueError("loss is detached: no input requires grad")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves = []
        for node in reversed(self.records):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                    leaves.append(node)
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
        for leaf in leaves:
            _check_finite(leaf.grad, "backward")
        return leaves


def backward(loss: Tensor) -> list[Tensor]:
    return Tape(loss).backward()


@dataclass
class GradCheckReport:
    max_error: float
    n_checked: int
    n_kinks: int


def grad_check_report(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, *,
                      wrt: Sequence[Tensor] = (), max_coords: int | None = None, seed: int = 0,
                      kink_tol: float | None = None) -> GradCheckReport:
    """Compare backprop with central differences coordinate by coordinate.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    ``wrt`` adds further tensors (e.g. layer weights) to check alongside ``x``;
    ``max_coords`` samples that many coordinates per tensor instead of all.
    With ``kink_tol`` set, coordinates whose forward and backward one-sided
    slopes differ by more than that (relative) straddle a non-differentiable
    point such as a ReLU or max-pool switch; they are counted, not scored.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    targets = [x, *wrt]
    for t in targets:
        t.data = np.ascontiguousarray(t.data)
        _check_finite(t.data, "grad_check input")
        t.requires_grad = True
        t.grad = None
    loss = f(x)
    base = loss.item()
    backward(loss)
    rng = np.random.default_rng(seed)
    worst, checked, kinks = 0.0, 0, 0
    for t in targets:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        with no_grad():
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                up = f(x).item()
                flat[i] = orig - eps
                down = f(x).item()
                flat[i] = orig
                num = (up - down) / (2 * eps)
                if not np.isfinite(num):
                    raise NumericalError("non-finite finite-difference estimate")
                if kink_tol is not None:
                    fwd, bwd = (up - base) / eps, (base - down) / eps
                    if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                        kinks += 1
                        continue
                ana = analytic.reshape(-1)[i]
                worst = max(worst, abs(ana - num) / max(1.0, abs(ana), abs(num)))
                checked += 1
    return GradCheckReport(worst, checked, kinks)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5, *,
               wrt: Sequence[Tensor] = (), max_coords: int | None = None,
               seed: int = 0) -> float:
    """Largest relative gap between backprop and central differences (see :func:`grad_check_report`)."""
    return grad_check_report(f, x, eps, wrt=wrt, max_coords=max_coords, seed=seed).max_error
