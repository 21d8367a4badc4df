"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Only the operations the network needs are provided. A :class:`Tensor` wraps a read-only
``numpy`` array; operations on tensors that require gradients record a :class:`TapeNode`
holding the inputs and a closure mapping the output gradient to input gradients.
:func:`backward` walks the recorded graph in reverse topological order.

Example:
    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> grads = backward(sum_(x * x) * 0.5)
    >>> grads[x]
    array([1., 2., 3.])
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from dmri_metsc.errors import DimensionError, ParameterError, UsageError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class TapeNode:
    """One recorded operation: kind, inputs, and the local backward rule."""

    op: str
    inputs: Tuple["Tensor", ...]
    backward_fn: BackwardFn


class Tensor:
    """Immutable dense real tensor."""

    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str = ""):
        array = np.array(data.data if isinstance(data, Tensor) else data, dtype=np.float64)
        if any(extent < 1 for extent in array.shape):
            raise DimensionError(f"tensor extents must be >= 1, got shape {array.shape}")
        array.flags.writeable = False
        self.data = array
        self.requires_grad = requires_grad
        self.node: Optional[TapeNode] = None
        self.name = name

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, inputs: Tuple["Tensor", ...], fn: BackwardFn):
        out = cls.__new__(cls)
        data = np.asarray(data, dtype=np.float64)
        data.flags.writeable = False
        out.data = data
        out.name = ""
        out.requires_grad = any(t.requires_grad for t in inputs)
        out.node = TapeNode(op, inputs, fn) if out.requires_grad else None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, "add", (a, b), fn)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g: np.ndarray):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, "sub", (a, b), fn)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def fn(g: np.ndarray):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, "mul", (a, b), fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def fn(g: np.ndarray):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return Tensor._from_op(out, "div", (a, b), fn)


def exp(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return Tensor._from_op(out, "exp", (x,), lambda g: (g * out,))


def atan(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(
        np.arctan(x.data), "atan", (x,), lambda g: (g / (1.0 + x.data * x.data),)
    )


def clip(x: ArrayLike, lo: float, hi: float) -> Tensor:
    """Clamp into [lo, hi]; gradient passes only where the value was inside the box."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._from_op(np.clip(x.data, lo, hi), "clip", (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul inner extents differ: {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})"
        )

    def fn(g: np.ndarray):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return Tensor._from_op(a.data @ b.data, "matmul", (a, b), fn)


def transpose(x: ArrayLike) -> Tensor:
    """Swap the last two axes."""
    x = as_tensor(x)
    return Tensor._from_op(
        np.swapaxes(x.data, -1, -2), "transpose", (x,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def reshape(x: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def sum_(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)

    def fn(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(x.data.sum(axis=axis, keepdims=keepdims), "sum", (x,), fn)


def mean(x: ArrayLike, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return sum_(x, axis=axis, keepdims=keepdims) * (1.0 / count)


def take(x: ArrayLike, index, axis: int = -1) -> Tensor:
    """Select entries along ``axis`` with an int, slice or index array."""
    x = as_tensor(x)
    axis = axis % x.ndim
    selector = [slice(None)] * x.ndim
    selector[axis] = index
    key = tuple(selector)

    def fn(g: np.ndarray):
        grad = np.zeros(x.shape)
        np.add.at(grad, key, g)
        return (grad,)

    return Tensor._from_op(x.data[key], "take", (x,), fn)


def concat(tensors: Sequence[ArrayLike], axis: int = -1) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    axis = axis % parts[0].ndim
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def fn(g: np.ndarray):
        return tuple(
            np.take(g, np.arange(bounds[k], bounds[k + 1]), axis=axis) for k in range(len(parts))
        )

    return Tensor._from_op(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, fn)


# ---------------------------------------------------------------------------
# Network layers
# ---------------------------------------------------------------------------


def relu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def gelu(x: ArrayLike) -> Tensor:
    """Exact GELU, x * Phi(x) with the erf form of the normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return Tensor._from_op(x.data * cdf, "gelu", (x,), lambda g: (g * (cdf + x.data * pdf),))


def layer_norm(x: ArrayLike, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize each row over the last axis, then apply the affine gain/bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ParameterError("layer_norm eps must be positive")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(f"layer_norm gain/bias must have shape ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def fn(g: np.ndarray):
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        dbias = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return dx, dgain, dbias

    return Tensor._from_op(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), fn)


def softmax_rows(x: ArrayLike) -> Tensor:
    """Softmax over the last axis, computed after subtracting the row maximum."""
    x = as_tensor(x)
    shifted = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    out = shifted / shifted.sum(axis=-1, keepdims=True)

    def fn(g: np.ndarray):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(out, "softmax", (x,), fn)


def hard_threshold(x: ArrayLike, lam: ArrayLike, nonneg: bool = True) -> Tensor:
    """Hard-threshold operator.

    ``nonneg`` zeroes entries below ``lam`` (negatives included); otherwise entries with
    ``|x| < lam`` are zeroed. Entries exactly at ``lam`` survive. The gradient with respect
    to ``x`` passes through on the support and is zero elsewhere. When ``lam`` is a tensor
    requiring gradients it receives the gradient of the sigmoid-relaxed gate
    ``x * sigmoid((x - lam) / t)`` with ``t = 0.1 * lam``.
    """
    x = as_tensor(x)
    lam_t = as_tensor(lam)
    if np.any(lam_t.data <= 0):
        raise ParameterError(f"threshold must be positive, got {lam_t.data}")
    level = x.data if nonneg else np.abs(x.data)
    keep = level >= lam_t.data

    def fn(g: np.ndarray):
        grad_lam = None
        if lam_t.requires_grad:
            temp = 0.1 * lam_t.data
            s = 1.0 / (1.0 + np.exp(-np.clip((level - lam_t.data) / temp, -60.0, 60.0)))
            grad_lam = _unbroadcast(-g * x.data * s * (1.0 - s) / temp, lam_t.shape)
        return g * keep, grad_lam

    return Tensor._from_op(x.data * keep, "hard_threshold", (x, lam_t), fn)


def dropout(
    x: ArrayLike, rate: float, rng: Optional[np.random.Generator] = None, training: bool = True
) -> Tensor:
    """Inverted dropout; identity when not training or when ``rate`` is zero."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ParameterError("dropout rate must be below 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    scale = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._from_op(x.data * scale, "dropout", (x,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.inputs:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Optional[Iterable[Tensor]] = None) -> Dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to every leaf requiring gradients.

    Gradients from multiple uses of a leaf are summed. Leaves listed in ``leaves`` that the
    loss does not reach get zero gradients.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    result: Dict[Tensor, np.ndarray] = {}
    for tensor in reversed(_topological_order(loss)):
        g = grads.pop(id(tensor), None)
        if g is None:
            continue
        if tensor.node is None:
            if tensor.requires_grad:
                result[tensor] = g
            continue
        for parent, pg in zip(tensor.node.inputs, tensor.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.array(pg, dtype=np.float64)
    for leaf in leaves or ():
        result.setdefault(leaf, np.zeros(leaf.shape))
    return result


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """First/second moment estimates per parameter name and the step counter."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Dict[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and leaves the inputs untouched."""
    step = state.step + 1
    new_params: Dict[str, np.ndarray] = {}
    new_m: Dict[str, np.ndarray] = {}
    new_v: Dict[str, np.ndarray] = {}
    for key, value in params.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(value)
        m = beta1 * state.m.get(key, np.zeros_like(value)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(key, np.zeros_like(value)) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_params[key] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamState(new_m, new_v, step)
