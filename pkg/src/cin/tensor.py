"""Dense tensors and a tape-based reverse-mode differentiation engine.

Values are numpy arrays (float64 unless :func:`set_default_dtype` says
otherwise) wrapped in an immutable :class:`Tensor`. Operations executed while a
:class:`GradTape` is active are recorded in execution order; :func:`backward`
replays them in reverse to produce gradients for every named leaf tensor.

Most operations accept an optional leading batch axis so a whole batch of
images can be pushed through one call. Each image in a batch is computed with
its own BLAS call, so results do not depend on the batch composition.
"""
from __future__ import annotations

import threading
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError, RankError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "set_default_dtype",
    "DIFFERENTIABLE_OPS",
    "matmul",
    "transpose",
    "row_softmax",
    "conv2d_3x3",
    "add",
    "sub",
    "mul",
    "neg",
    "abs",
    "relu",
    "scale",
    "pool_spatial_mean",
    "avg_pool2x2",
    "fully_connected",
    "reshape",
    "concat",
    "take",
    "batch_scale",
    "tensor_sum",
    "row_norm",
    "cross_entropy",
]

_DTYPE = np.float64
_local = threading.local()

# names of every op that records a backward rule; the gradcheck suite must cover all of them
DIFFERENTIABLE_OPS: list = []


def set_default_dtype(dtype) -> None:
    """Switch the scalar type of newly created tensors (float32 carries no accuracy guarantees)."""
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


class Tensor:
    """Immutable n-dimensional array with an optional gradient requirement.

    A tensor with ``requires_grad=True`` and a ``name`` is a leaf parameter:
    :func:`backward` reports its gradient under that name.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=_DTYPE)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor data contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

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
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        extra = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{extra}, requires_grad={self.requires_grad})"

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("op", "out", "inputs", "vjp")

    def __init__(self, op, out, inputs, vjp):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Records differentiable operations while active (use as a context manager).

    ``kink_margin`` tracks the smallest distance to a nondifferentiable point
    (relu, abs, norm at zero) seen during recording; finite-difference checks
    use it to reject probes sitting on a kink.
    """

    def __init__(self):
        self.ops: list = []
        self.grads: Dict[str, Tensor] = {}
        self.kink_margin = np.inf

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.ops)

    def _note_kink(self, distances: np.ndarray) -> None:
        if distances.size:
            self.kink_margin = min(self.kink_margin, float(distances.min()))


def _active_tape() -> Optional[GradTape]:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _differentiable(fn):
    DIFFERENTIABLE_OPS.append(fn.__name__)
    return fn


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = np.asarray(out, dtype=_DTYPE)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    req = any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, req)
    tape = _active_tape()
    if req and tape is not None:
        tape.ops.append(_Node(op, result, tuple(inputs), vjp))
    return result


def _kink(values: np.ndarray) -> None:
    tape = _active_tape()
    if tape is not None:
        tape._note_kink(np.abs(values))


def backward(loss: Tensor, tape: GradTape, params: Optional[Mapping[str, Tensor]] = None) -> Dict[str, Tensor]:
    """Gradients of a scalar ``loss`` with respect to every named leaf on ``tape``.

    Parameters listed in ``params`` that the loss does not depend on receive
    zero gradients of matching shape. The result is also stored on ``tape.grads``.
    """
    if loss.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(node.out is loss for node in tape.ops):
        raise ContractError("loss was not produced by an operation recorded on this tape")

    grads = {id(loss): np.ones((), dtype=loss.data.dtype)}
    named: Dict[str, np.ndarray] = {}
    for node in reversed(tape.ops):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.name is not None:
                named[inp.name] = named[inp.name] + gi if inp.name in named else gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi

    result = {}
    if params is not None:
        for name, p in params.items():
            result[name] = Tensor(named.get(name, np.zeros(p.shape)))
    for name, g in named.items():
        if name not in result:
            result[name] = Tensor(g)
    tape.grads = result
    return result


# ---------------------------------------------------------------- linear algebra


@_differentiable
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two rank-2 tensors, or of two equally sized stacks of matrices."""
    a, b = _as_tensor(a), _as_tensor(b)
    ok = a.ndim == b.ndim and a.ndim in (2, 3) and a.shape[-1] == b.shape[-2]
    if ok and a.ndim == 3:
        ok = a.shape[0] == b.shape[0]
    if not ok:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    A, B = a.data, b.data

    def vjp(g):
        return g @ np.swapaxes(B, -1, -2), np.swapaxes(A, -1, -2) @ g

    out = A @ B if A.ndim == 2 else np.stack([A[i] @ B[i] for i in range(A.shape[0])])
    return _emit("matmul", out, (a, b), vjp)


@_differentiable
def transpose(a: Tensor) -> Tensor:
    """Swap the two matrix axes of a rank-2 tensor (or of each matrix in a rank-3 stack)."""
    if a.ndim not in (2, 3):
        raise RankError(f"transpose needs a rank-2 tensor, got shape {a.shape}")
    return _emit("transpose", np.swapaxes(a.data, -1, -2).copy(), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def _stable_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@_differentiable
def row_softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by each row's maximum."""
    if a.ndim not in (2, 3):
        raise RankError(f"row_softmax needs a rank-2 tensor, got shape {a.shape}")
    if not np.isfinite(a.data).all():
        raise NonFiniteError("row_softmax input is not finite")
    s = _stable_softmax(a.data)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("row_softmax", s, (a,), vjp)


@_differentiable
def conv2d_3x3(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, on (h, w, c_in) or (n, h, w, c_in) input."""
    if x.ndim not in (3, 4):
        raise RankError(f"conv2d_3x3 needs (h, w, c) or (n, h, w, c) input, got {x.shape}")
    if kernel.shape[:2] != (3, 3) or kernel.ndim != 4:
        raise DimensionError(f"conv2d_3x3 kernel must be (3, 3, c_in, c_out), got {kernel.shape}")
    c_in, c_out = kernel.shape[2], kernel.shape[3]
    if x.shape[-1] != c_in:
        raise DimensionError(f"conv2d_3x3 channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d_3x3 bias must be ({c_out},), got {bias.shape}")

    single = x.ndim == 3
    X = x.data[None] if single else x.data
    n, h, w, _ = X.shape
    padded = np.pad(X, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # windows come out as (n, h, w, c_in, 3, 3); reorder to match the kernel layout
    cols = sliding_window_view(padded, (3, 3), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = cols.reshape(n, h * w, 9 * c_in)
    K = kernel.data.reshape(9 * c_in, c_out)
    out = (np.stack([cols[i] @ K for i in range(n)]) + bias.data).reshape(n, h, w, c_out)

    def vjp(g):
        g = g.reshape(n, h * w, c_out)
        gk = (cols.reshape(-1, 9 * c_in).T @ g.reshape(-1, c_out)).reshape(kernel.shape)
        gb = g.sum(axis=(0, 1))
        if not x.requires_grad:
            return None, gk, gb
        gcols = np.ascontiguousarray((g @ K.T).reshape(n, h, w, 3, 3, c_in).transpose(3, 4, 0, 1, 2, 5))
        gpad = np.zeros((n, h + 2, w + 2, c_in), dtype=g.dtype)
        for di in range(3):
            for dj in range(3):
                gpad[:, di:di + h, dj:dj + w] += gcols[di, dj]
        gx = gpad[:, 1:-1, 1:-1]
        return (gx[0] if single else gx), gk, gb

    return _emit("conv2d_3x3", out[0] if single else out, (x, kernel, bias), vjp)


@_differentiable
def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` for a vector or each row of a matrix."""
    if weight.ndim != 2 or bias.shape != (weight.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"fully_connected mismatch: x {x.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    X, Wt = x.data, weight.data

    def vjp(g):
        if X.ndim == 1:
            return g @ Wt, np.outer(g, X), g
        return g @ Wt, g.T @ X, g.sum(axis=0)

    return _emit("fully_connected", X @ Wt.T + bias.data, (x, weight, bias), vjp)


# ---------------------------------------------------------------- elementwise


def _broadcast_pair(op: str, a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


@_differentiable
def add(a, b) -> Tensor:
    a, b = _broadcast_pair("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


@_differentiable
def sub(a, b) -> Tensor:
    a, b = _broadcast_pair("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


@_differentiable
def mul(a, b) -> Tensor:
    a, b = _broadcast_pair("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (_reduce_to(g * B, a.shape), _reduce_to(g * A, b.shape)))


@_differentiable
def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


@_differentiable
def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a constant (non-differentiable) scalar."""
    factor = float(factor)
    return _emit("scale", a.data * factor, (a,), lambda g: (g * factor,))


@_differentiable
def abs(a: Tensor) -> Tensor:  # noqa: A001
    """Absolute value; the subgradient at 0 is 0."""
    A = a.data
    _kink(A)
    return _emit("abs", np.abs(A), (a,), lambda g: (g * np.sign(A),))


@_differentiable
def relu(a: Tensor) -> Tensor:
    A = a.data
    _kink(A)
    return _emit("relu", np.maximum(A, 0.0), (a,), lambda g: (g * (A > 0),))


@_differentiable
def batch_scale(x: Tensor, s: Tensor) -> Tensor:
    """Scale item ``i`` of a stacked tensor by ``s[i]``."""
    if s.ndim != 1 or x.ndim < 1 or x.shape[0] != s.shape[0]:
        raise DimensionError(f"batch_scale mismatch: x {x.shape}, s {s.shape}")
    X, S = x.data, s.data
    bshape = (-1,) + (1,) * (X.ndim - 1)

    def vjp(g):
        return g * S.reshape(bshape), (g * X).reshape(X.shape[0], -1).sum(axis=1)

    return _emit("batch_scale", X * S.reshape(bshape), (x, s), vjp)


# ---------------------------------------------------------------- pooling and reductions


@_differentiable
def pool_spatial_mean(x: Tensor) -> Tensor:
    """Per-channel mean over the two spatial axes: (h, w, c) -> (c,), (n, h, w, c) -> (n, c)."""
    if x.ndim not in (3, 4):
        raise RankError(f"pool_spatial_mean needs (h, w, c) or (n, h, w, c), got {x.shape}")
    h, w = x.shape[-3], x.shape[-2]
    shape = x.shape

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, (-3, -2)), shape) / (h * w),)

    return _emit("pool_spatial_mean", x.data.mean(axis=(-3, -2)), (x,), vjp)


@_differentiable
def avg_pool2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 mean pooling over the spatial axes."""
    if x.ndim not in (3, 4):
        raise RankError(f"avg_pool2x2 needs (h, w, c) or (n, h, w, c), got {x.shape}")
    h, w, c = x.shape[-3:]
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2x2 needs even spatial extents, got {x.shape}")
    lead = x.shape[:-3]
    out = x.data.reshape(lead + (h // 2, 2, w // 2, 2, c)).mean(axis=(-4, -2))

    def vjp(g):
        g = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2)
        return (g / 4.0,)

    return _emit("avg_pool2x2", out, (x,), vjp)


@_differentiable
def tensor_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum of all entries, or along one axis."""
    X = x.data
    if axis is None:
        return _emit("tensor_sum", np.asarray(X.sum()), (x,), lambda g: (np.broadcast_to(g, X.shape),))
    ax = axis % X.ndim

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, ax), X.shape),)

    return _emit("tensor_sum", X.sum(axis=ax), (x,), vjp)


@_differentiable
def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm along the last axis; the subgradient at the zero vector is 0."""
    X = x.data
    nrm = np.sqrt((X * X).sum(axis=-1))
    _kink(nrm)

    def vjp(g):
        safe = np.where(nrm > 0, nrm, 1.0)
        return (np.where(nrm[..., None] > 0, X / safe[..., None], 0.0) * g[..., None],)

    return _emit("row_norm", nrm, (x,), vjp)


@_differentiable
def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (n, k) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy mismatch: logits {logits.shape}, labels {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DimensionError("cross_entropy label out of range")
    Z = logits.data
    shifted = Z - Z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = Z.shape[0]
    rows = np.arange(n)

    def vjp(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _emit("cross_entropy", np.asarray(-logp[rows, labels].mean()), (logits,), vjp)


# ---------------------------------------------------------------- shape manipulation


@_differentiable
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    orig = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {orig} to {shape}") from exc
    return _emit("reshape", out.copy(), (x,), lambda g: (g.reshape(orig),))


@_differentiable
def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat mismatch: {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


@_differentiable
def take(x: Tensor, indices) -> Tensor:
    """Select items along the leading axis (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1 or (idx.size and (idx.min() < -x.shape[0] or idx.max() >= x.shape[0])):
        raise DimensionError(f"take: bad indices for leading extent {x.shape[0]}")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _emit("take", x.data[idx], (x,), vjp)
