"""Dense tensors with tape-based reverse-mode differentiation.

Operations record a node on the active ``Tape`` only when one of their inputs
requires a gradient, so inference code runs the same functions without
building a graph. Usage::

    with Tape() as tape:
        loss = cross_entropy(model(x), targets)
        backward(loss, tape)
"""
import contextvars
import logging
from typing import Callable, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from models.errors import ContractError, DataError, DimensionError, ParameterError

# Set up logger
logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_active_tape: contextvars.ContextVar = contextvars.ContextVar("sdflow_active_tape", default=None)


class Node:
    __slots__ = ("output", "inputs", "backward_fn", "op")

    def __init__(self, output, inputs, backward_fn, op):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive operations, in execution order."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._token = None

    def record(self, node: Node):
        self.nodes.append(node)

    def clear(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __contains__(self, node):
        return any(n is node for n in self.nodes)

    def __enter__(self):
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


class Tensor:
    # Make ndarray (op) Tensor defer to the Tensor operators.
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_lift(other, self), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_lift(other, self), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _pair(a, b):
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    if not isinstance(b, Tensor):
        b = _lift(b, a)
    return a, b


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(out, tuple(inputs), backward_fn, op)
        out._node = node
        tape.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), _backward, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), _backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), _backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def _backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data / b.data, (a, b), _backward, "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power supports scalar exponents only")
    exponent = float(exponent)
    out = a.data ** exponent

    def _backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _result(out.astype(a.dtype, copy=False), (a,), _backward, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def _backward(g):
        return (g * 0.5 / np.maximum(out, 1e-12),)

    return _result(out, (a,), _backward, "sqrt")


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(a: Tensor) -> Tensor:
    s = sigmoid_array(a.data)

    def _backward(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _result(a.data * s, (a,), _backward, "silu")


# ---------------------------------------------------------------------------
# Reductions and shape
# ---------------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims), dtype=a.dtype)

    def _backward(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _result(out, (a,), _backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a: Tensor, index) -> Tensor:
    def _backward(g):
        full = np.zeros(a.shape, dtype=a.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.asarray(a.data[index]), (a,), _backward, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def _backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, _backward, "concat")


def repeat(a: Tensor, repeats: int, axis: int) -> Tensor:
    """Nearest-neighbour upsampling along ``axis``."""
    axis = axis % a.ndim

    def _backward(g):
        shape = list(a.shape)
        shape.insert(axis + 1, repeats)
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _result(np.repeat(a.data, repeats, axis=axis), (a,), _backward, "repeat")


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        logger.error(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def _backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), _backward, "matmul")


# ---------------------------------------------------------------------------
# Network primitives
# ---------------------------------------------------------------------------

def conv1d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation over the last axis.

    Args:
        x: input of shape (C_in, L) or (B, C_in, L).
        w: kernel of shape (C_out, C_in, k).
        stride: positive step between windows.
        padding: zeros added on both ends.

    Returns:
        Tensor of shape (C_out, L_out) or (B, C_out, L_out) with
        L_out = floor((L + 2*padding - k) / stride) + 1.
    """
    if stride < 1 or padding < 0:
        raise ParameterError(f"invalid conv1d stride={stride} padding={padding}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise DimensionError(f"conv1d expects (B, C, L) input and (C_out, C_in, k) kernel, got {x.shape} and {w.shape}")
    batch, c_in, length = xd.shape
    c_out, c_in_w, kernel = w.shape
    if c_in != c_in_w:
        raise DimensionError(f"conv1d channel mismatch: input has {c_in}, kernel expects {c_in_w}")
    padded = length + 2 * padding
    if padded < kernel:
        raise DimensionError(f"conv1d kernel {kernel} larger than padded input {padded}")
    out_len = (padded - kernel) // stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding))) if padding else xd
    cols = sliding_window_view(xp, kernel, axis=2)[:, :, ::stride, :][:, :, :out_len, :]
    out = np.tensordot(cols, w.data, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if unbatched:
        out = out[0]

    def _backward(g):
        gb = g[None] if unbatched else g
        gw = np.tensordot(gb, cols, axes=([0, 2], [0, 2]))
        gcols = np.tensordot(gb, w.data, axes=([1], [0])).transpose(0, 2, 1, 3)
        gxp = np.zeros((batch, c_in, padded), dtype=xd.dtype)
        span = stride * (out_len - 1) + 1
        for j in range(kernel):
            gxp[:, :, j:j + span:stride] += gcols[:, :, :, j]
        gx = gxp[:, :, padding:padding + length]
        if unbatched:
            gx = gx[0]
        return gx, gw.astype(w.dtype, copy=False)

    return _result(np.ascontiguousarray(out), (x, w), _backward, "conv1d")


def _check_temperature(temperature: float):
    if not temperature > 0:
        logger.error(f"Invalid temperature {temperature}")
        raise ParameterError(f"temperature must be positive, got {temperature}")


def softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)) / temperature,)

    return _result(out, (x,), _backward, "softmax")


def log_softmax(x: Tensor, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    z = x.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def _backward(g):
        return ((g - probs * g.sum(axis=axis, keepdims=True)) / temperature,)

    return _result(out, (x,), _backward, "log_softmax")


def cross_entropy(logits: Tensor, targets, temperature: float = 1.0) -> Tensor:
    """Mean over positions of -log softmax(logits / temperature)[target]."""
    _check_temperature(temperature)
    targets = np.asarray(targets)
    n_classes = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        logger.error(f"Target index out of range [0, {n_classes})")
        raise DataError(f"target index out of range [0, {n_classes})")
    z = logits.data / temperature
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    flat_logp = logp.reshape(-1, n_classes)
    flat_t = targets.reshape(-1)
    count = flat_t.size
    loss = -flat_logp[np.arange(count), flat_t].mean()

    def _backward(g):
        grad = np.exp(flat_logp)
        grad[np.arange(count), flat_t] -= 1.0
        grad *= g / (count * temperature)
        return (grad.reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _backward, "cross_entropy")


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance (no affine)."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv
    n = x.shape[-1]

    def _backward(g):
        gsum = g.sum(axis=-1, keepdims=True)
        gxsum = (g * xhat).sum(axis=-1, keepdims=True)
        return (inv / n * (n * g - gsum - xhat * gxsum),)

    return _result(xhat.astype(x.dtype, copy=False), (x,), _backward, "layer_norm")


def normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale slices along ``axis`` to unit l2 norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    norm = np.maximum(norm, eps)
    out = x.data / norm

    def _backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, (x,), _backward, "normalize")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data, dtype=x.dtype)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Optional[Tape] = None):
    """Populate ``grad`` on every leaf that requires it, then clear the tape.

    Leaf gradients accumulate across calls until ``zero_grad``.
    """
    tape = tape if tape is not None else _active_tape.get()
    if loss.size != 1:
        logger.error(f"backward called on non-scalar loss of shape {loss.shape}")
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if tape is None or loss._node is None or loss._node not in tape:
        raise ContractError("loss was not produced on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for parent, pg in zip(node.inputs, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._node is None:
                pg = np.array(pg, dtype=parent.dtype)
                parent.grad = pg if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    tape.clear()


# ---------------------------------------------------------------------------
# Finite-difference checks
# ---------------------------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: Optional[float] = None) -> List[np.ndarray]:
    """Central differences of ``fn()`` with respect to each tensor, perturbed in place."""
    grads = []
    for p in params:
        step = eps if eps is not None else (1e-6 if p.dtype == np.float64 else 1e-2)
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        grad = np.zeros(p.shape, dtype=np.float64)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = float(fn().data)
            flat[i] = original - step
            minus = float(fn().data)
            flat[i] = original
            gflat[i] = (plus - minus) / (2.0 * step)
        grads.append(grad)
    return grads


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: Optional[float] = None) -> float:
    """Largest relative error between autodiff and central-difference gradients."""
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        backward(loss, tape)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]
    numeric = numerical_gradient(fn, params, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    logger.debug(f"gradient check max relative error {worst:.3e}")
    return worst
