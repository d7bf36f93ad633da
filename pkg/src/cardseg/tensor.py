"""Dense tensors plus a reverse-mode autodiff tape.

Every learnable computation in the package flows through `Tensor` ops
recorded on the active `Tape`.  The tape is rebuilt on every forward pass
(define-by-run): ops append nodes in execution order, which is already a
valid topological order, so `backward` is a single reverse sweep with
gradient accumulation.

Convention: float32 for training, float64 for finite-difference gradient
checking (float32 step sizes are too coarse for central differences).
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    AxisOutOfRange,
    DivisionDomain,
    NonFiniteEvaluation,
    NonScalarRoot,
    ShapeMismatch,
)

DEFAULT_DTYPE = np.float32

# guard for elementwise division; |divisor| below this raises DivisionDomain
DIV_EPSILON = 1e-12

# when True, every op asserts its output is finite (slow; enabled in tests)
_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    global _debug_checks
    _debug_checks = bool(enabled)


def _check_finite(data: np.ndarray, op: str) -> None:
    if _debug_checks and not np.all(np.isfinite(data)):
        raise NonFiniteEvaluation(f"{op} produced non-finite values")


class Tensor:
    """Dense n-dimensional array with optional gradient participation.

    `data` is always a row-major numpy array.  Tensors produced by ops are
    treated as immutable; leaf tensors (parameters, norm buffers) may have
    `data` rebound by their single writer (optimizer / batch-norm update).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if not arr.flags.c_contiguous:
            # ascontiguousarray would promote 0-d to 1-d; 0-d is always contiguous
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the recorded ops below
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __neg__(self):
        return mul(self, _as_tensor(-1.0, self.dtype))

    def sum(self, axes=None, keep_dims: bool = False) -> "Tensor":
        return reduce_sum(self, axes, keep_dims)


def _as_tensor(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


class _Node:
    __slots__ = ("inputs", "out", "backward")

    def __init__(self, inputs: Sequence[Tensor], out: Tensor, backward: Callable):
        self.inputs = tuple(inputs)
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of ops for one forward pass.

    Nodes are appended in execution order; inputs of a node always precede
    it, so the reverse sweep in `backward` respects the chain rule without
    an explicit topological sort.
    """

    _active: Optional["Tape"] = None

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        self._prev = Tape._active
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = self._prev

    def backward(self, root: Tensor) -> dict:
        """Gradients of the scalar `root` w.r.t. every requires_grad tensor.

        Returns a map Tensor -> ndarray of the same shape; also mirrors the
        result onto each tensor's `.grad`.  Gradients accumulate when a
        tensor feeds multiple nodes.
        """
        if root.size != 1:
            raise NonScalarRoot(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        tensors: dict[int, Tensor] = {id(root): root}
        for node in reversed(self.nodes):
            g_out = grads.get(id(node.out))
            if g_out is None:
                continue
            in_grads = node.backward(g_out)
            for inp, g in zip(node.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    tensors[key] = inp
        result = {}
        for key, g in grads.items():
            t = tensors[key]
            if t.requires_grad:
                t.grad = g
                result[t] = g
        return result


def backward(tape: Tape, root: Tensor) -> dict:
    return tape.backward(root)


def record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable, op: str) -> Tensor:
    """Wrap `out_data` in a Tensor and register the node on the active tape.

    `backward_fn(g_out)` must return one gradient array (or None) per input,
    in order.  Recording is skipped entirely when no tape is active or no
    input participates in gradients, which makes eval-mode forwards free of
    autodiff overhead.
    """
    _check_finite(out_data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = Tape._active
    if tape is not None and needs:
        tape.nodes.append(_Node(inputs, out, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of trailing-dimension broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        out_shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None
    if out_shape != a.shape:
        raise ShapeMismatch(
            f"{kind}: second operand {b.shape} must broadcast into first operand {a.shape}"
        )


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bwd(g):
        return g, _unbroadcast(g, b.shape)

    return record((a, b), out, bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bwd(g):
        return g, -_unbroadcast(g, b.shape)

    return record((a, b), out, bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bwd(g):
        ga = g * b.data if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record((a, b), out, bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")
    if np.abs(b.data).min() < DIV_EPSILON:
        raise DivisionDomain(f"divisor magnitude below {DIV_EPSILON}")
    out = a.data / b.data

    def bwd(g):
        ga = g / b.data if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record((a, b), out, bwd, "div")


def elementwise_binary(a: Tensor, b: Tensor, kind: str) -> Tensor:
    ops = {"add": add, "sub": sub, "mul": mul, "div": div}
    if kind not in ops:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return ops[kind](a, b)


def _normalize_axes(axes, ndim: int):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(set(int(ax) for ax in axes)))
    for ax in axes:
        if ax < -ndim or ax >= ndim:
            raise AxisOutOfRange(f"axis {ax} invalid for ndim {ndim}")
    return tuple(ax % ndim for ax in axes)


def reduce_sum(x: Tensor, axes=None, keep_dims: bool = False) -> Tensor:
    """Sum over an axis set; empty set is the identity (returns x itself)."""
    if axes is not None and not isinstance(axes, int) and len(tuple(axes)) == 0:
        return x
    ax = _normalize_axes(axes, x.ndim)
    out = x.data.sum(axis=ax, keepdims=keep_dims)

    def bwd(g):
        if not keep_dims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, x.shape),)

    return record((x,), out, bwd, "reduce_sum")


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must map the float64 tensor `x` to a scalar tensor.  Error per
    coordinate is |analytic - fd| / max(1, |analytic|); the max over all
    coordinates is returned.  Raises NonFiniteEvaluation if any evaluation
    is non-finite.
    """
    if x.dtype != np.float64:
        raise NonFiniteEvaluation("grad_check requires a float64 input tensor")
    x.requires_grad = True
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise NonScalarRoot("grad_check target must be scalar")
    if not np.isfinite(y.data).all():
        raise NonFiniteEvaluation("f(x) is not finite")
    grads = tape.backward(y)
    analytic = grads.get(x)
    if analytic is None:
        analytic = np.zeros_like(x.data)
    if not np.isfinite(analytic).all():
        raise NonFiniteEvaluation("analytic gradient is not finite")

    flat = x.data.reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(x.data.copy())).item()
        flat[i] = orig - h
        lo = f(Tensor(x.data.copy())).item()
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteEvaluation(f"perturbed evaluation non-finite at coordinate {i}")
        fd[i] = (hi - lo) / (2.0 * h)
    a = analytic.reshape(-1)
    rel = np.abs(a - fd) / np.maximum(1.0, np.abs(a))
    return float(rel.max()) if rel.size else 0.0
