"""Module implementing `Tensor`, a minimal reverse-mode automatic
differentiation engine built on top of numpy.

Every operation applied to a tensor that requires gradient is recorded on a
`Tape` (one tape per thread). Calling `backward()` on a scalar loss walks this
tape in exact reverse order and accumulates the gradients into the leaf
tensors (the model parameters).

Tensors are 32-bit by default. Use the `precision()` context manager to create
64-bit tensors (for gradient checks).
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit
from scipy.special import log_softmax as sp_log_softmax
from scipy.special import softmax as sp_softmax


DEFAULT_DTYPE = np.float32
RMS_EPS = 1e-6
GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_FLOOR = 1e-8

ArrayLike = Union[np.ndarray, float, int, Sequence]


class TensorShapeError(ValueError):
    """Custom Exception when the shapes given to a primitive don't conform."""

    pass


@dataclass
class TapeEntry:
    """One operation recorded on the tape.

    Args:
        name (str): Name of the primitive.
        inputs (Tuple[Tensor, ...]): Input tensors of the operation.
        output (Tensor): Output tensor of the operation.
        backward (Callable): Function receiving the gradient of the output and
            returning the gradients of each input (or `None`).
    """

    name: str
    inputs: Tuple["Tensor", ...]
    output: "Tensor"
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tape:
    """Ordered record of the operations executed since the last backward."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def record(self, entry: TapeEntry) -> None:
        """Append an operation to the tape.

        Args:
            entry (TapeEntry): Operation to record.
        """
        self.entries.append(entry)

    def clear(self) -> None:
        """Forget every recorded operation."""
        self.entries = []

    def __len__(self) -> int:
        return len(self.entries)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.grad_enabled = True
        self.dtype = np.dtype(DEFAULT_DTYPE)


_state = _State()


def get_tape() -> Tape:
    """Return the tape of the current thread."""
    return _state.tape


def reset_tape() -> None:
    """Drop the operations recorded on the tape of the current thread."""
    _state.tape.clear()


def get_default_dtype() -> np.dtype:
    """Return the floating point type used for new tensors in this thread."""
    return _state.dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Context manager changing the floating point type of new tensors.

    Args:
        dtype: numpy floating type (`np.float32` or `np.float64`).
    """
    previous = _state.dtype
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Context manager disabling the recording of operations."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tensor:
    """Dense n-dimensional array with an optional gradient.

    Args:
        data (ArrayLike): Values of the tensor. Floating values are converted
            to `dtype` (or to the default floating type of the thread), integer
            values are kept as they are.
        requires_grad (bool, optional): If `True`, gradients are accumulated
            in `grad` when calling `backward()`.
        dtype (optional): Floating type to use.
    """

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if arr.dtype.kind in "fc" or dtype is not None or arr.dtype.kind == "b":
            arr = arr.astype(dtype or _state.dtype)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out.is_leaf = False
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        """Return a copy of the values."""
        return self.data.copy()

    def item(self) -> float:
        """Return the value of a tensor holding a single element."""
        if self.data.size != 1:
            raise TensorShapeError(f"item: expected a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Reset the gradient to zeros."""
        self.grad = np.zeros_like(self.data)

    def __add__(self, other) -> Tensor:
        return add(self, other)

    def __radd__(self, other) -> Tensor:
        return add(other, self)

    def __sub__(self, other) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other) -> Tensor:
        return sub(other, self)

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other) -> Tensor:
        if isinstance(other, Tensor):
            raise TypeError("Division is only supported by constants")
        return mul(self, 1.0 / np.asarray(other))

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __matmul__(self, other) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key) -> Tensor:
        return index(self, key)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self) -> Tensor:
        return exp(self)


def tensor(data: ArrayLike, requires_grad: bool = False) -> Tensor:
    """Create a tensor with the default floating type of the thread.

    Args:
        data (ArrayLike): Values of the tensor.
        requires_grad (bool, optional): Whether gradients should be tracked.

    Returns:
        Created tensor.
    """
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and like.dtype.kind == "f" else None
    return Tensor(np.asarray(x), dtype=dtype or _state.dtype)


def _record(name: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _state.tape.record(TapeEntry(name, tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.data.size == 1 or b.data.size == 1:
        return
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        out = None
    # One operand has to broadcast into the other one (no mutual expansion)
    if out is None or (out != a.shape and out != b.shape):
        raise TensorShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def backward(loss: Tensor) -> None:
    """Compute the gradient of the given scalar loss with respect to every
    tensor requiring gradient that was used to compute it.

    The tape is walked in exact reverse order of recording. Gradients
    accumulate additively into the leaf tensors (so a parameter used several
    times receives the sum of the contributions). The tape is cleared
    afterward.

    Args:
        loss (Tensor): Scalar tensor to differentiate.

    Raises:
        TensorShapeError: If the loss is not a scalar.
        ValueError: If nothing was recorded on the tape.
    """
    if loss.data.size != 1:
        raise TensorShapeError(f"backward: the loss should be a scalar, got shape {loss.shape}")
    tape = _state.tape
    if len(tape) == 0:
        raise ValueError("backward: the tape is empty, nothing to differentiate")

    grads = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue

        for inp, inp_grad in zip(entry.inputs, entry.backward(g)):
            if inp_grad is None or not inp.requires_grad:
                continue
            inp_grad = inp_grad.astype(inp.dtype, copy=False)
            if inp.is_leaf:
                inp.grad = np.array(inp_grad) if inp.grad is None else inp.grad + inp_grad
            else:
                key = id(inp)
                grads[key] = grads[key] + inp_grad if key in grads else inp_grad

    tape.clear()


def add(a, b) -> Tensor:
    """Element-wise addition (one operand may broadcast into the other)."""
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)
    return _record(
        "add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a, b) -> Tensor:
    """Element-wise subtraction (one operand may broadcast into the other)."""
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)
    return _record(
        "sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a, b) -> Tensor:
    """Element-wise multiplication (one operand may broadcast into the other)."""
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    """Element-wise exponential."""
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    `b` is either a matrix (shared by all the leading batch dimensions of `a`)
    or has exactly the same leading dimensions as `a`.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (b.ndim > 2 and b.shape[:-2] != a.shape[:-2]):
        raise TensorShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _backward(g):
        ga = g @ _swap(b.data)
        gb = _swap(a.data) @ g
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return _record("matmul", a.data @ b.data, (a, b), _backward)


def embedding_lookup(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of an embedding table.

    Args:
        weight (Tensor): Table of shape (vocab, dim).
        ids (np.ndarray): Integer array of any shape.

    Returns:
        Tensor of shape `ids.shape + (dim,)`.
    """
    ids = np.asarray(ids)
    if weight.ndim != 2 or ids.dtype.kind not in "iu":
        raise TensorShapeError(f"embedding_lookup: incompatible shapes {weight.shape} and {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise TensorShapeError(f"embedding_lookup: ids out of range for table of shape {weight.shape}")

    def _backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return _record("embedding_lookup", weight.data[ids], (weight,), _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along the given axis."""
    y = sp_softmax(x.data, axis=axis)
    return _record("softmax", y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Log-softmax along the given axis."""
    y = sp_log_softmax(x.data, axis=axis)
    return _record("log_softmax", y, (x,), lambda g: (g - np.exp(y) * g.sum(axis=axis, keepdims=True),))


def rms_normalize(x: Tensor, weight: Optional[Tensor] = None, eps: float = RMS_EPS) -> Tensor:
    """Root-mean-square normalization over the last axis, with an optional
    per-channel gain.
    """
    if weight is not None and weight.shape != (x.shape[-1],):
        raise TensorShapeError(f"rms_normalize: incompatible shapes {x.shape} and {weight.shape}")
    r = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    n = x.data * r
    out = n * weight.data if weight is not None else n

    def _backward(g):
        gn = g * weight.data if weight is not None else g
        gx = r * gn - x.data * (r**3) * (gn * x.data).mean(axis=-1, keepdims=True)
        if weight is None:
            return (gx,)
        return gx, (g * n).reshape(-1, x.shape[-1]).sum(axis=0)

    inputs = (x,) if weight is None else (x, weight)
    return _record("rms_normalize", out, inputs, _backward)


def silu(x: Tensor) -> Tensor:
    """Sigmoid linear unit, `x * sigmoid(x)`."""
    s = expit(x.data)
    return _record("silu", x.data * s, (x,), lambda g: (g * (s + x.data * s * (1 - s)),))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map `x @ weight + bias` over the last axis.

    Args:
        x (Tensor): Input of shape (..., in).
        weight (Tensor): Weight of shape (in, out).
        bias (Tensor, optional): Bias of shape (out,).

    Returns:
        Tensor of shape (..., out).
    """
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or (bias is not None and bias.shape != weight.shape[1:]):
        raise TensorShapeError(f"linear: incompatible shapes {x.shape} and {weight.shape}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def _backward(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = g @ weight.data.T
        gw = x.data.reshape(-1, weight.shape[0]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("linear", out, inputs, _backward)


def scaled_dot_product_attention(q: Tensor, k: Tensor, v: Tensor, causal: bool = False) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    With `causal=True`, query `i` sees the keys up to `i + (Tk - Tq)`, so the
    queries are aligned on the last keys (this is how cached decoding works).

    Args:
        q (Tensor): Queries of shape (..., Tq, D).
        k (Tensor): Keys of shape (..., Tk, D).
        v (Tensor): Values of shape (..., Tk, Dv).
        causal (bool, optional): Whether to apply the causal mask.

    Returns:
        Tensor of shape (..., Tq, Dv).
    """
    if (
        q.shape[:-2] != k.shape[:-2]
        or k.shape[:-1] != v.shape[:-1]
        or q.shape[-1] != k.shape[-1]
        or (causal and k.shape[-2] < q.shape[-2])
    ):
        raise TensorShapeError(f"scaled_dot_product_attention: incompatible shapes {q.shape} and {k.shape}")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = (q.data @ _swap(k.data)) * scale
    if causal:
        tq, tk = q.shape[-2], k.shape[-2]
        future = np.arange(tk)[None, :] > (np.arange(tq)[:, None] + (tk - tq))
        scores = np.where(future, -np.inf, scores)
    p = sp_softmax(scores, axis=-1).astype(q.dtype, copy=False)

    def _backward(g):
        gv = _swap(p) @ g
        gp = g @ _swap(v.data)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        return (gs @ k.data) * scale, (_swap(gs) @ q.data) * scale, gv

    return _record("scaled_dot_product_attention", p @ v.data, (q, k, v), _backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean cross-entropy over the masked positions.

    Args:
        logits (Tensor): Unnormalized scores of shape (..., V).
        targets (np.ndarray): Integer targets of shape (...).
        mask (np.ndarray, optional): Boolean array of shape (...) selecting the
            scored positions. All positions are scored if not given.

    Raises:
        TensorShapeError: If the shapes don't conform.
        ValueError: If the mask selects nothing.

    Returns:
        Scalar tensor.
    """
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if logits.shape[:-1] != targets.shape or mask.shape != targets.shape:
        raise TensorShapeError(f"cross_entropy: incompatible shapes {logits.shape} and {targets.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: the mask selects no position")

    safe = np.where(mask, targets, 0)
    logp = sp_log_softmax(logits.data, axis=-1)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -picked[mask].sum() / n

    def _backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], axis=-1) - 1, axis=-1)
        grad = grad * (mask[..., None] * (g / n))
        return (grad,)

    return _record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), _backward)


def mean_squared_error(pred: Tensor, target, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared error over the masked elements.

    Elements outside of the mask are never read, so the result is
    bit-invariant to their values.

    Args:
        pred (Tensor): Predictions.
        target (Tensor or np.ndarray): Targets, same shape as `pred`.
        mask (np.ndarray, optional): Boolean array broadcastable to the shape
            of `pred`. All elements are used if not given.

    Raises:
        TensorShapeError: If the shapes don't conform.
        ValueError: If the mask selects nothing.

    Returns:
        Scalar tensor.
    """
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise TensorShapeError(f"mean_squared_error: incompatible shapes {pred.shape} and {target.shape}")
    if mask is None:
        sel = np.ones(pred.shape, dtype=bool)
    else:
        try:
            sel = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
        except ValueError:
            raise TensorShapeError(f"mean_squared_error: incompatible shapes {pred.shape} and {np.shape(mask)}")
    n = int(sel.sum())
    if n == 0:
        raise ValueError("mean_squared_error: the mask selects no element")

    diff = pred.data[sel] - target.data[sel]
    loss = (diff * diff).sum() / n

    def _backward(g):
        gp = np.zeros_like(pred.data)
        gp[sel] = diff * (2.0 * g / n)
        return gp, -gp

    return _record("mean_squared_error", np.asarray(loss, dtype=pred.dtype), (pred, target), _backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate tensors along an existing axis."""
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise TensorShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record(
        "concat",
        np.concatenate([t.data for t in tensors], axis=ax),
        tensors,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def index(x: Tensor, key) -> Tensor:
    """Slice a tensor with numpy indexing."""

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, key, g)
        return (gx,)

    return _record("slice", np.ascontiguousarray(x.data[key]), (x,), _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Change the shape of a tensor, keeping the row-major order."""
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise TensorShapeError(f"reshape: incompatible shapes {x.shape} and {tuple(shape)}")
    return _record("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute the axes of a tensor."""
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise TensorShapeError(f"transpose: incompatible shapes {x.shape} and {axes}")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))
    return _record("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Sum over the given axes (all of them by default)."""
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record("sum", np.asarray(out), (x,), _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Mean over the given axes (all of them by default)."""
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def gather(x: Tensor, ids: np.ndarray) -> Tensor:
    """Pick one element per row along the last axis.

    Args:
        x (Tensor): Tensor of shape (..., V).
        ids (np.ndarray): Integer array of shape (...).

    Returns:
        Tensor of shape (...).
    """
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise TensorShapeError(f"gather: incompatible shapes {x.shape} and {ids.shape}")

    def _backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, ids[..., None], g[..., None], axis=-1)
        return (gx,)

    return _record("gather", np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0], (x,), _backward)


def rotary(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position encoding over the last axis (split in two halves).

    Args:
        x (Tensor): Tensor of shape (..., T, D), D even.
        cos (np.ndarray): Cosines of shape (T, D / 2).
        sin (np.ndarray): Sines of shape (T, D / 2).

    Returns:
        Rotated tensor, same shape as `x`.
    """
    half = x.shape[-1] // 2
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], half) or sin.shape != cos.shape:
        raise TensorShapeError(f"rotary: incompatible shapes {x.shape} and {cos.shape}")
    cos, sin = cos.astype(x.dtype), sin.astype(x.dtype)
    x1, x2 = x.data[..., :half], x.data[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    def _backward(g):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=-1),)

    return _record("rotary", out, (x,), _backward)


def grad_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = GRAD_CHECK_STEP,
    max_coords: Optional[int] = None,
) -> float:
    """Compare the gradient computed by `backward()` with central finite
    differences.

    The function `f` must read `point` (which is modified in place while
    probing) and return a scalar. `point` must hold 64-bit values.

    Args:
        f (Callable[[Tensor], Tensor]): Scalar function to check.
        point (Tensor): Where to check the gradient.
        h (float, optional): Finite-difference step.
        max_coords (int, optional): If given, only the coordinates with the
            largest analytic gradients are probed (to bound the runtime on
            large parameter tensors).

    Returns:
        Maximum over the probed coordinates of
        `|analytic - numeric| / (|numeric| + 1e-8)`.
    """
    assert point.dtype == np.float64, f"Gradient checks require 64-bit values (got {point.dtype})"
    point.requires_grad = True
    point.grad = None
    reset_tape()

    backward(f(point))
    analytic = point.grad.reshape(-1).copy()
    point.grad = None

    flat = point.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.sort(np.argsort(-np.abs(analytic), kind="stable")[:max_coords])

    worst = 0.0
    with no_grad():
        for i in coords:
            original = flat[i]
            flat[i] = original + h
            f_plus = f(point).item()
            flat[i] = original - h
            f_minus = f(point).item()
            flat[i] = original

            numeric = (f_plus - f_minus) / (2 * h)
            worst = max(worst, abs(analytic[i] - numeric) / (abs(numeric) + GRAD_CHECK_FLOOR))
    return worst
