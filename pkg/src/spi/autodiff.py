"""Reverse-mode automatic differentiation over dense numpy tensors.

A small taped engine: forward functions compute numpy values and record
adjoint rules on the active ``Tape``; ``backward`` walks the tape in reverse
and returns gradients for named trainable leaves. Only the primitives the
dialogue model needs are implemented, each with explicit shape checks.
Arithmetic is float64 unless ``set_default_dtype`` opts into float32.

Adjoint rules live in module-level ``_*_vjp`` functions that node closures
look up by name at call time, so tests can swap a rule in and verify the
checkers notice.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_LOCAL = threading.local()
_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the dtype for new tensors. float32 is an opt-in speed mode."""
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """Dense real tensor; leaves may be named and marked trainable."""

    __slots__ = ("data", "name", "trainable")

    def __init__(self, data, name: str | None = None, trainable: bool = False,
                 _validate: bool = True):
        arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        if _validate and not np.isfinite(arr).all():
            raise NumericError(f"tensor {name or '<anon>'} has non-finite entries")
        self.data = arr
        self.name = name
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


def leaf(data, name: str | None = None, trainable: bool = False) -> Tensor:
    """Create a leaf tensor (validated finite)."""
    return Tensor(data, name=name, trainable=trainable)


def constant(x) -> Tensor:
    return Tensor(x)


class Tape:
    """Ordered record of primitive applications for one backward pass.

    Used as a context manager; entering pushes it onto a thread-local stack
    so tapes never interleave across threads.
    """

    __slots__ = ("_nodes", "_out_ids")

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._out_ids: set[int] = set()

    def __enter__(self) -> "Tape":
        stack = getattr(_LOCAL, "stack", None)
        if stack is None:
            stack = _LOCAL.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _LOCAL.stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def clear(self) -> None:
        self._nodes.clear()
        self._out_ids.clear()

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._nodes.append((out, inputs, vjp))
        self._out_ids.add(id(out))


def active_tape() -> Tape | None:
    stack = getattr(_LOCAL, "stack", None)
    return stack[-1] if stack else None


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable,
          check: bool, op: str) -> Tensor:
    if check and not np.isfinite(out_data).all():
        raise NumericError(f"{op} produced a non-finite value")
    out = Tensor(out_data, _validate=False)
    tape = active_tape()
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


def backward(tape: Tape, root: Tensor) -> dict[str, np.ndarray]:
    """Accumulate adjoints from a scalar root; returns {leaf name: gradient}.

    Covers every named trainable leaf consumed on the tape; leaves the root
    does not depend on get zero gradients. Returned arrays must be treated
    as read-only.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if id(root) not in tape._out_ids and not root.trainable:
        raise ContractError("backward root was not produced on this tape")
    adjoints: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaves: dict[str, Tensor] = {}
    if root.trainable and root.name is not None:
        leaves[root.name] = root
    for out, inputs, vjp in reversed(tape._nodes):
        grad_out = adjoints.pop(id(out), None)
        if grad_out is None:
            continue
        grads_in = vjp(grad_out)
        for tensor, grad in zip(inputs, grads_in):
            if grad is None:
                continue
            key = id(tensor)
            held = adjoints.get(key)
            adjoints[key] = grad if held is None else held + grad
            if tensor.trainable and tensor.name is not None:
                prior = leaves.get(tensor.name)
                if prior is not None and prior is not tensor:
                    raise ContractError(
                        f"two distinct trainable leaves share the name {tensor.name!r}")
                leaves[tensor.name] = tensor
    out: dict[str, np.ndarray] = {}
    for name, tensor in leaves.items():
        grad = adjoints.get(id(tensor))
        out[name] = np.zeros_like(tensor.data) if grad is None else np.asarray(grad)
    return out


# ---------------------------------------------------------------------------
# primitives


def _shape_of(t: Tensor) -> tuple[int, ...]:
    return t.data.shape


def _matmul_vjp(g, ad, bd):
    if ad.ndim == 2 and bd.ndim == 2:
        return g @ bd.T, ad.T @ g
    if ad.ndim == 2 and bd.ndim == 1:
        return np.outer(g, bd), ad.T @ g
    if ad.ndim == 1 and bd.ndim == 2:
        return bd @ g, np.outer(ad, g)
    return g * bd, g * ad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2):
        raise ShapeError(f"matmul expects rank 1 or 2, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def vjp(g, ad=ad, bd=bd):
        return _matmul_vjp(g, ad, bd)

    return _emit(out, (a, b), vjp, check=True, op="matmul")


def _add_same_vjp(g):
    return g, g


def _add_bias_vjp(g):
    return g, g.sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape == bd.shape:
        vjp = lambda g: _add_same_vjp(g)
    elif ad.ndim == 2 and bd.ndim == 1 and ad.shape[1] == bd.shape[0]:
        # row-wise bias: the only broadcast this engine supports
        vjp = lambda g: _add_bias_vjp(g)
    else:
        raise ShapeError(f"add cannot combine shapes {ad.shape} and {bd.shape}")
    return _emit(ad + bd, (a, b), vjp, check=True, op="add")


def _mul_vjp(g, ad, bd):
    if ad.shape == bd.shape:
        return g * bd, g * ad
    if ad.shape == ():
        return (g * bd).sum(), g * ad
    return g * bd, (g * ad).sum()


def multiply(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.shape != bd.shape and ad.shape != () and bd.shape != ():
        raise ShapeError(f"multiply needs equal shapes or a scalar, got {ad.shape} * {bd.shape}")
    out = ad * bd

    def vjp(g, ad=ad, bd=bd):
        return _mul_vjp(g, ad, bd)

    return _emit(out, (a, b), vjp, check=True, op="multiply")


def _tanh_vjp(g, y):
    return (g * (1.0 - y * y),)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def vjp(g, y=y):
        return _tanh_vjp(g, y)

    return _emit(y, (x,), vjp, check=False, op="tanh")


def _relu_vjp(g, xd):
    return (g * (xd > 0.0),)


def relu(x: Tensor) -> Tensor:
    xd = x.data

    def vjp(g, xd=xd):
        return _relu_vjp(g, xd)

    return _emit(np.maximum(xd, 0.0), (x,), vjp, check=False, op="relu")


def _softmax_vjp(g, y):
    inner = (g * y).sum(axis=-1, keepdims=True)
    return ((g - inner) * y,)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis of a rank-1 or rank-2 tensor."""
    xd = x.data
    if xd.ndim not in (1, 2):
        raise ShapeError(f"softmax expects rank 1 or 2, got {xd.shape}")
    shifted = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g, y=y):
        return _softmax_vjp(g, y)

    return _emit(y, (x,), vjp, check=False, op="softmax")


def _log_vjp(g, xd):
    return (g / xd,)


def log(x: Tensor) -> Tensor:
    xd = x.data
    out = np.log(xd) if (xd > 0.0).all() else np.full(xd.shape, np.nan)

    def vjp(g, xd=xd):
        return _log_vjp(g, xd)

    return _emit(out, (x,), vjp, check=True, op="log")


def _reduce_sum_vjp(g, shape, axis):
    if axis is None:
        return (np.full(shape, g),)
    return (np.broadcast_to(g, shape).copy(),)


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    if axis not in (None, 0):
        raise ContractError(f"reduce_sum supports axis None or 0, got {axis}")
    if axis == 0 and xd.ndim != 2:
        raise ShapeError(f"reduce_sum over axis 0 expects rank 2, got {xd.shape}")
    out = xd.sum(axis=axis)
    shape = xd.shape

    def vjp(g, shape=shape, axis=axis):
        return _reduce_sum_vjp(g, shape, axis)

    return _emit(out, (x,), vjp, check=True, op="sum")


def _reduce_mean_vjp(g, shape, axis, n):
    if axis is None:
        return (np.full(shape, g / n),)
    return (np.broadcast_to(g / n, shape).copy(),)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    xd = x.data
    if axis not in (None, 0):
        raise ContractError(f"reduce_mean supports axis None or 0, got {axis}")
    if axis == 0 and xd.ndim != 2:
        raise ShapeError(f"reduce_mean over axis 0 expects rank 2, got {xd.shape}")
    if xd.size == 0:
        raise ContractError("reduce_mean of an empty tensor")
    n = xd.shape[0] if axis == 0 else xd.size
    out = xd.mean(axis=axis)
    shape = xd.shape

    def vjp(g, shape=shape, axis=axis, n=n):
        return _reduce_mean_vjp(g, shape, axis, n)

    return _emit(out, (x,), vjp, check=True, op="mean")


def _gather_vjp(g, shape, idx):
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, idx, g)
    return (out,)


def gather_rows(x: Tensor, idx) -> Tensor:
    """Select rows by index; an int index drops the leading axis.

    Duplicate indices accumulate gradient, so this doubles as the embedding
    lookup.
    """
    xd = x.data
    if isinstance(idx, (int, np.integer)):
        i = int(idx)
        if not -xd.shape[0] <= i < xd.shape[0]:
            raise ShapeError(f"row index {i} out of range for shape {xd.shape}")
        key: int | np.ndarray = i
        out = xd[i]
    else:
        arr = np.asarray(idx)
        if arr.ndim != 1 or arr.size == 0:
            raise ShapeError(f"gather_rows needs a non-empty 1-d index list, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ContractError("gather_rows indices must be integers")
        if (arr < 0).any() or (arr >= xd.shape[0]).any():
            raise ShapeError(f"gather_rows index out of range for shape {xd.shape}")
        key = arr
        out = xd[arr]
    shape = xd.shape

    def vjp(g, shape=shape, key=key):
        return _gather_vjp(g, shape, key)

    return _emit(out, (x,), vjp, check=False, op="gather-rows")


def _concat_vjp(g, shapes, axis):
    grads = []
    start = 0
    for shape in shapes:
        if axis == 0:
            rows = shape[0] if len(shape) == 2 else 1
            piece = g[start:start + rows]
            start += rows
        else:
            width = shape[-1]
            piece = g[..., start:start + width]
            start += width
        grads.append(piece.reshape(shape))
    return tuple(grads)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along axis 0 (rows; rank-1 parts count as single rows)
    or along the last axis."""
    if len(parts) == 0:
        raise ContractError("concat of zero parts")
    datas = [p.data for p in parts]
    if axis == 0:
        if any(d.ndim not in (1, 2) for d in datas):
            raise ShapeError("concat axis 0 expects rank 1 or 2 parts")
        widths = {d.shape[-1] for d in datas}
        if len(widths) != 1:
            raise ShapeError(f"concat axis 0 parts disagree on width: {sorted(widths)}")
        out = np.vstack(datas)
    elif axis in (-1, datas[0].ndim - 1):
        axis = -1
        lead = {d.shape[:-1] for d in datas}
        if len(lead) != 1:
            raise ShapeError("concat last-axis parts disagree on leading shape")
        out = np.concatenate(datas, axis=-1)
    else:
        raise ContractError(f"concat supports axis 0 or the last axis, got {axis}")
    shapes = [d.shape for d in datas]

    def vjp(g, shapes=tuple(shapes), axis=axis):
        return _concat_vjp(g, shapes, axis)

    return _emit(out, tuple(parts), vjp, check=False, op="concat")


def _stack_vjp(g, n):
    return tuple(g[i] for i in range(n))


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped parts along a new leading axis (scalars give rank 1)."""
    if len(parts) == 0:
        raise ContractError("stack_rows of zero parts")
    datas = [p.data for p in parts]
    if len({d.shape for d in datas}) != 1:
        raise ShapeError("stack_rows parts must share a shape")
    out = np.stack(datas, axis=0)
    n = len(datas)

    def vjp(g, n=n):
        return _stack_vjp(g, n)

    return _emit(out, tuple(parts), vjp, check=False, op="stack-rows")


def _squared_l2_vjp(g, xd):
    return ((2.0 * g) * xd,)


def squared_l2(x: Tensor) -> Tensor:
    xd = x.data
    out = np.asarray((xd * xd).sum())

    def vjp(g, xd=xd):
        return _squared_l2_vjp(g, xd)

    return _emit(out, (x,), vjp, check=True, op="squared-l2")


# thin composites, each recorded through the ops above


def scale(x: Tensor, c: float) -> Tensor:
    return multiply(x, Tensor(float(c)))


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, neg(b))


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "multiply": multiply,
    "tanh": tanh,
    "relu": relu,
    "softmax-over-last-axis": softmax,
    "log": log,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "gather-rows": gather_rows,
    "concat-last-axis": lambda a, b: concat((a, b), axis=-1),
    "squared-l2": squared_l2,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by kind name; unknown kinds are contract errors."""
    fn = PRIMITIVES.get(kind)
    if fn is None:
        raise ContractError(f"unknown primitive kind {kind!r}")
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Central-difference comparison for one scalar-valued function."""

    rel_error: np.ndarray
    max_rel_error: float
    tol: float
    bad_coords: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.bad_coords

    def __str__(self) -> str:
        if self.passed:
            return f"gradcheck ok (max rel err {self.max_rel_error:.3e})"
        worst = self.bad_coords[0]
        return (f"gradcheck FAILED at coordinate {worst}: rel err "
                f"{self.rel_error[worst]:.3e} > tol {self.tol:.1e}")


def gradcheck(fn: Callable[[Tensor], Tensor], point: np.ndarray,
              h: float = 1e-5, tol: float = 1e-4,
              floor: float = 1e-6) -> GradCheckReport:
    """Compare the taped gradient of ``fn`` at ``point`` against central
    finite differences, coordinate by coordinate.

    The per-coordinate relative error divides by max(|analytic|, |numeric|,
    floor). The floor bounds the scale below which double-precision central
    differences cannot resolve a gradient at all (roundoff of order
    eps·|fn|/h); a genuinely wrong adjoint of any visible magnitude still
    produces a relative error near 1.
    """
    point = np.asarray(point, dtype=np.float64)
    with Tape() as tape:
        out = fn(Tensor(point, name="x", trainable=True))
        if out.size != 1:
            raise ContractError("gradcheck target must return a scalar")
        # a function independent of x has gradient zero everywhere
        analytic = backward(tape, out).get("x", np.zeros_like(point))

    def value_at(p: np.ndarray) -> float:
        return float(fn(Tensor(p)).data)

    numeric = np.zeros_like(point)
    flat = point.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        hi = value_at((flat + bump).reshape(point.shape))
        lo = value_at((flat - bump).reshape(point.shape))
        num_flat[i] = (hi - lo) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    bad = [tuple(ix) for ix in np.argwhere(rel > tol)]
    return GradCheckReport(rel_error=rel, max_rel_error=float(rel.max()) if rel.size else 0.0,
                           tol=tol, bad_coords=bad)
