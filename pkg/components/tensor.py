"""
Tensor Core

Dense numpy-backed tensors with a single-use reverse-mode tape.

Storage is float32 unless a tensor is created with dtype=np.float64 (used by
the gradient checker and test oracles). Every kernel accumulates in float64 and casts the result back
to the storage dtype of its inputs.

Usage:
    with Tape():
        loss = mse(matmul(x, w), y)
    backward(loss)
"""

import os
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from components.errors import DegenerateInputError, DimensionError, NumericalError, ParameterError, TapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence, float, int]

_GELU_C = np.sqrt(2.0 / np.pi)
_debug_nans = os.getenv('HMAE_DEBUG_NANS', '0') == '1'
_local = threading.local()


def set_debug_nans(enabled: bool):
    """Turn the per-op finiteness check on or off."""
    global _debug_nans
    _debug_nans = enabled


class Tensor:
    """N-dimensional array with optional gradient."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=np.float32):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional['Tape'] = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{label})"

    @property
    def shape(self) -> Tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise DimensionError("division is only supported by python scalars")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Op:
    name: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of differentiable ops. Usable for exactly one backward pass."""

    def __init__(self):
        self.ops: List[_Op] = []
        self.consumed = False

    def __enter__(self) -> 'Tape':
        stack = getattr(_local, 'stack', None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.stack.pop()
        return False

    def record(self, op: _Op):
        if self.consumed:
            raise TapeError(f"cannot record '{op.name}' on a consumed tape")
        self.ops.append(op)

    def __len__(self):
        return len(self.ops)


def current_tape() -> Optional[Tape]:
    stack = getattr(_local, 'stack', None)
    return stack[-1] if stack else None


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result_dtype(inputs: Sequence[Tensor]):
    return np.float64 if any(t.data.dtype == np.float64 for t in inputs) else np.float32


def _f64(t: Tensor) -> np.ndarray:
    return t.data.astype(np.float64, copy=False)


def _emit(name: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data, dtype=_result_dtype(inputs))
    if _debug_nans and not np.all(np.isfinite(out.data)):
        raise NumericalError(f"non-finite output from '{name}' (input shapes {[t.shape for t in inputs]})")
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(_Op(name, inputs, out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")
    if shape != a.shape and shape != b.shape:
        raise DimensionError(f"{op}: broadcasting {a.shape} with {b.shape} would enlarge both operands")
    return shape


def _normalize_axis(axis: int, ndim: int, op: str) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"{op}: axis {axis} out of range for rank {ndim}")
    return axis % ndim


# Elementwise arithmetic

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, 'add')

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _emit('add', _f64(a) + _f64(b), (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, 'sub')

    def back(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)
    return _emit('sub', _f64(a) - _f64(b), (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, 'mul')
    av, bv = _f64(a), _f64(b)

    def back(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)
    return _emit('mul', av * bv, (a, b), back)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _emit('scale', _f64(x) * factor, (x,), lambda g: (g * factor,))


# Linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product over the last two axes.

    Args:
        a: Tensor[..., m, k]
        b: Tensor[k, n] or Tensor[..., k, n] with the same leading axes as a

    Returns:
        Tensor[..., m, n]
    """
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    av, bv = _f64(a), _f64(b)

    def back(g):
        da = np.matmul(g, np.swapaxes(bv, -1, -2))
        db = np.matmul(np.swapaxes(av, -1, -2), g)
        return da, _unbroadcast(db, b.shape)
    return _emit('matmul', np.matmul(av, bv), (a, b), back)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit('transpose', np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"reshape: cannot view {original} as {tuple(shape)}")
    return _emit('reshape', data, (x,), lambda g: (g.reshape(original),))


def take(x: Tensor, indices: Union[Sequence[int], np.ndarray, int], axis: int = 0) -> Tensor:
    """Gather slices along an axis. Repeated indices accumulate their gradients."""
    axis = _normalize_axis(axis, x.ndim, 'take')
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise DimensionError(f"take: indices out of range for axis {axis} of size {x.shape[axis]}")

    def back(g):
        full = np.zeros(x.shape, dtype=np.float64)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0) if idx.ndim else g)
        return (full,)
    return _emit('take', np.take(x.data, idx, axis=axis), (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_wrap(t) for t in tensors)
    axis = _normalize_axis(axis, tensors[0].ndim, 'concat')
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != axis):
            raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))
    return _emit('concat', np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# Reductions

def sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(np.float64),)
    return _emit('sum', _f64(x).sum(axis=axis, keepdims=keepdims), (x,), back)


def mean(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# Nonlinearities and normalization

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along one axis."""
    axis = _normalize_axis(axis, x.ndim, 'softmax')
    v = _f64(x)
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)
    return _emit('softmax', y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _normalize_axis(axis, x.ndim, 'log_softmax')
    v = _f64(x)
    shifted = v - v.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)
    return _emit('log_softmax', out, (x,), back)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size == 0:
        raise DegenerateInputError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DimensionError(f"cross_entropy: label outside [0, {logits.shape[1]})")
    logp = log_softmax(logits, axis=1)
    picked = take(reshape(logp, (-1,)), np.arange(labels.size) * logits.shape[1] + labels)
    return scale(sum(picked), -1.0 / labels.size)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with population variance, then apply gamma/beta."""
    if eps <= 0:
        raise ParameterError(f"layer_norm: eps must be > 0, got {eps}")
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs last axis {width}")
    v = _f64(x)
    mu = v.mean(axis=-1, keepdims=True)
    centered = v - mu
    rstd = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * rstd
    gv = _f64(gamma)

    def back(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gv
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgamma, dbeta
    return _emit('layer_norm', xhat * gv + _f64(beta), (x, gamma, beta), back)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximation GELU."""
    v = _f64(x)
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)

    def back(g):
        sech2 = 1.0 - t ** 2
        return (g * (0.5 * (1.0 + t) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)),)
    return _emit('gelu', 0.5 * v * (1.0 + t), (x,), back)


def mse(pred: Tensor, target: Tensor, mask: Optional[Sequence[int]] = None) -> Tensor:
    """
    Mean squared error, optionally restricted to a set of rows (axis 0).

    Args:
        pred: Prediction tensor
        target: Target tensor of identical shape
        mask: Row indices to include; all rows when None

    Returns:
        Scalar tensor
    """
    pred, target = _wrap(pred), _wrap(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: pred {pred.shape} vs target {target.shape}")
    diff = _f64(pred) - _f64(target)
    if mask is None:
        weights = np.ones_like(diff)
    else:
        rows = np.unique(np.asarray(mask, dtype=np.int64))
        if rows.size == 0:
            raise DegenerateInputError("mse: mask selects no positions")
        if rows.min() < 0 or rows.max() >= pred.shape[0]:
            raise DimensionError(f"mse: mask index out of range for {pred.shape[0]} rows")
        weights = np.zeros_like(diff)
        weights[rows] = 1.0
    count = weights.sum()
    value = (weights * diff ** 2).sum() / count

    def back(g):
        d = g * 2.0 * weights * diff / count
        return d, -d
    return _emit('mse', np.asarray(value), (pred, target), back)


# Reverse pass

def backward(loss: Tensor):
    """
    Populate .grad of every requires_grad tensor reachable from a scalar loss.

    Leaf gradients are added to any gradient already present.

    Raises:
        TapeError: loss is not scalar, was not recorded, or its tape was consumed
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise TapeError("loss was not produced inside a live Tape")
    if tape.consumed:
        raise TapeError("tape already consumed; run a new forward pass before backward")
    tape.consumed = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    seen: Dict[int, Tensor] = {id(loss): loss}
    for op in reversed(tape.ops):
        g = grads.pop(id(op.output), None)
        if g is None:
            continue
        op.output.grad = g.astype(op.output.dtype)
        for tensor, tg in zip(op.inputs, op.backward(g)):
            if tg is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            seen[key] = tensor
            grads[key] = grads[key] + tg if key in grads else tg

    for key, g in grads.items():
        leaf = seen[key]
        g = g.astype(leaf.dtype)
        leaf.grad = g if leaf.grad is None else leaf.grad + g


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3) -> float:
    """
    Compare analytic gradients with central differences.

    x is promoted to float64 in place and perturbed coordinate by coordinate;
    f may read x directly or through any object that holds it.

    Returns:
        max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)
    """
    if h <= 0:
        raise ParameterError(f"grad_check: h must be > 0, got {h}")
    x.data = x.data.astype(np.float64)
    x.requires_grad = True
    x.grad = None
    with Tape():
        out = f(x)
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)

    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = f(x).item()
        flat[i] = saved - h
        minus = f(x).item()
        flat[i] = saved
        numeric[i] = (plus - minus) / (2.0 * h)

    a = analytic.reshape(-1)
    err = np.abs(a - numeric) / np.maximum(1e-8, np.abs(a) + np.abs(numeric))
    worst = float(err.max()) if err.size else 0.0
    logger.debug(f"grad_check over {flat.size} coordinates: max relative error {worst:.3e}")
    return worst
