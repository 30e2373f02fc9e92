"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every differentiable operation appends one record to the active :class:`Tape`
(input tensors, output node id, backward rule).  :func:`backward` walks the
records in reverse, visiting each exactly once, and accumulates gradients into
the ``grad`` buffers of leaf tensors created with ``requires_grad=True``.

Convolutions are cross-correlations (no kernel flip), as in every mainstream
deep learning framework.  Broadcasting follows numpy's trailing-dimension rule.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_node_ids = itertools.count(1)


@dataclass
class _Record:
    inputs: tuple["Tensor", ...]
    output_id: int
    backward: BackwardFn


@dataclass
class Tape:
    """Ordered list of recorded operations; inputs always precede their users."""

    ops: list[_Record] = field(default_factory=list)

    def record(self, inputs: tuple["Tensor", ...], output_id: int, backward: BackwardFn) -> None:
        self.ops.append(_Record(inputs, output_id, backward))

    def clear(self) -> None:
        self.ops.clear()

    def __len__(self) -> int:
        return len(self.ops)


_active_tape = Tape()
_grad_enabled = True


def current_tape() -> Tape:
    return _active_tape


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; results are constants."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextmanager
def fresh_tape() -> Iterator[Tape]:
    """Record into a private tape for the duration of the block."""
    global _active_tape
    previous = _active_tape
    _active_tape = Tape()
    try:
        yield _active_tape
    finally:
        _active_tape = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """n-dimensional float64 array that may participate in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "is_leaf")
    __array_priority__ = 1000  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.node_id = next(_node_ids)
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @classmethod
    def _result(cls, data: np.ndarray, inputs: tuple["Tensor", ...], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.is_leaf = True
        out.node_id = next(_node_ids)
        out.requires_grad = False
        if _grad_enabled and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out.is_leaf = False
            _active_tape.record(inputs, out.node_id, backward)
        return out

    # -- array-ish helpers -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def abs(self) -> "Tensor":
        return abs(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def backward(self) -> None:
        backward(self)


TensorLike = Tensor | np.ndarray | float | int


def as_tensor(x: TensorLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Create a tensor produced by a custom operation.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    ``None``) per input, each with that input's shape.
    """
    return Tensor._result(np.asarray(data, dtype=np.float64), tuple(inputs), backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise binary ------------------------------------------------------

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def _backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), _backward)


def div(a: TensorLike, b: TensorLike, eps: float | None = None) -> Tensor:
    """Elementwise ``a / (b + eps)``.

    Without ``eps`` a zero anywhere in the denominator raises
    ``ZeroDivisionError``; with ``eps`` the guard is added to every element.
    """
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    den = b.data if eps is None else b.data + eps
    if eps is None and np.any(den == 0):
        raise ZeroDivisionError(f"div: denominator of shape {b.shape} has zero elements")
    out = a.data / den

    def _backward(g):
        ga = _unbroadcast(g / den, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / den, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), _backward)


def maximum(a: TensorLike, b: TensorLike) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "maximum")
    pick_a = a.data >= b.data
    return Tensor._result(
        np.where(pick_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# -- elementwise unary -------------------------------------------------------

def neg(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,))


def abs(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._result(np.abs(a.data), (a,), lambda g: (g * sign,))


def pow(a: TensorLike, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("pow: only scalar exponents are supported")
    a = as_tensor(a)
    p = float(exponent)
    return Tensor._result(a.data**p, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,))


def log(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: non-positive input")
    return Tensor._result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def _backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(out > 0, g * 0.5 / out, 0.0),)

    return Tensor._result(out, (a,), _backward)


def sin(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def relu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return Tensor._result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def leaky_relu(a: TensorLike, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return Tensor._result(a.data * factor, (a,), lambda g: (g * factor,))


def elu(a: TensorLike) -> Tensor:
    a = as_tensor(a)
    neg_part = np.expm1(np.minimum(a.data, 0.0))
    on = a.data >= 0
    return Tensor._result(
        np.where(on, a.data, neg_part),
        (a,),
        lambda g: (g * np.where(on, 1.0, neg_part + 1.0),),
    )


def clamp_min(a: TensorLike, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > lo
    return Tensor._result(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,))


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"reduction axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    if a.size == 0:
        raise ValueError("sum: empty reduction")
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return Tensor._result(np.asarray(out), (a,), _backward)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if a.size == 0 or count == 0:
        raise ValueError("mean: empty reduction")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor._result(np.asarray(out), (a,), _backward)


# -- shape manipulation ------------------------------------------------------

def reshape(a: TensorLike, shape) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a: TensorLike, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("getitem: index with numpy arrays, not tensors")
    advanced = _is_advanced(index)

    def _backward(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor._result(np.array(a.data[index]), (a,), _backward)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._result(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    return Tensor._result(
        out,
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))),
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """2-d @ 2-d or 2-d @ 1-d matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def _backward(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor._result(a.data @ b.data, (a, b), _backward)


# -- image operations (tensors laid out [..., C, H, W]) -----------------------

def conv2d(x: TensorLike, weight: TensorLike, bias: TensorLike | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [C,H,W] with ``weight`` [F,C,k,k]; zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected input [C,H,W] and weight [F,C,k,k], got {x.shape} and {weight.shape}")
    C, H, W = x.shape
    F, C2, k, k2 = weight.shape
    if C != C2:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {C2}")
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"conv2d: non-positive output extent {Ho}x{Wo} for input {H}x{W}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(C * k * k, Ho * Wo)
    wmat = weight.data.reshape(F, -1)
    out = wmat @ cols
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[:, None]
        inputs = (x, weight, bias)

    def _backward(g):
        g2 = g.reshape(F, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            # (k, k, C) row order keeps each scattered slab contiguous
            wk = weight.data.transpose(2, 3, 1, 0).reshape(k * k * C, F)
            dcols = (wk @ g2).reshape(k, k, C, Ho, Wo)
            dxp = np.zeros(xp.shape)
            hi, wi = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + hi : stride, j : j + wi : stride] += dcols[i, j]
            gx = dxp[:, padding : padding + H, padding : padding + W] if padding else dxp
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return Tensor._result(out.reshape(F, Ho, Wo), inputs, _backward)


def filter2d(x: TensorLike, kernel: np.ndarray) -> Tensor:
    """Apply one constant 2-d kernel to every [H,W] plane of ``x`` (valid mode)."""
    x = as_tensor(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    H, W = x.shape[-2:]
    Ho, Wo = H - kh + 1, W - kw + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError(f"filter2d: kernel {kernel.shape} larger than input {x.shape}")
    out = np.zeros(x.shape[:-2] + (Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            if kernel[i, j] != 0.0:
                out += kernel[i, j] * x.data[..., i : i + Ho, j : j + Wo]

    def _backward(g):
        gx = np.zeros(x.shape)
        for i in range(kh):
            for j in range(kw):
                if kernel[i, j] != 0.0:
                    gx[..., i : i + Ho, j : j + Wo] += kernel[i, j] * g
        return (gx,)

    return Tensor._result(out, (x,), _backward)


def pad_reflect(x: TensorLike, pad: int) -> Tensor:
    """Mirror-pad the last two axes by ``pad`` cells (edge not repeated)."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if pad >= H or pad >= W:
        raise ValueError(f"pad_reflect: pad {pad} too large for {H}x{W}")
    rows = np.pad(np.arange(H), pad, mode="reflect")
    cols = np.pad(np.arange(W), pad, mode="reflect")
    out = x.data[..., rows[:, None], cols[None, :]]
    flat = (rows[:, None] * W + cols[None, :]).ravel()

    def _backward(g):
        lead = g.shape[:-2]
        g2 = g.reshape(-1, flat.size)
        gx = np.stack([np.bincount(flat, weights=row, minlength=H * W) for row in g2])
        return (gx.reshape(lead + (H, W)),)

    return Tensor._result(out, (x,), _backward)


def upsample2x(x: TensorLike) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    H, W = x.shape[-2:]

    def _backward(g):
        return (g.reshape(g.shape[:-2] + (H, 2, W, 2)).sum(axis=(-3, -1)),)

    return Tensor._result(out, (x,), _backward)


def downsample2x_avg(x: TensorLike) -> Tensor:
    """2x2 mean pooling of the last two axes; extents must be even."""
    x = as_tensor(x)
    H, W = x.shape[-2:]
    if H % 2 or W % 2:
        raise ValueError(f"downsample2x_avg: spatial extents must be even, got {H}x{W}")
    lead = x.shape[:-2]
    out = x.data.reshape(lead + (H // 2, 2, W // 2, 2)).mean(axis=(-3, -1))

    def _backward(g):
        return (0.25 * g.repeat(2, axis=-2).repeat(2, axis=-1),)

    return Tensor._result(out, (x,), _backward)


# -- backward pass -----------------------------------------------------------

def backward(root: Tensor, tape: Tape | None = None, retain: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The tape is cleared afterwards unless ``retain`` is set.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be a single element, got shape {root.shape}")
    if not root.requires_grad:
        return
    if root.is_leaf:
        root.grad = root.grad + 1.0
        return
    tape = _active_tape if tape is None else tape
    grads: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    for op in reversed(tape.ops):
        g = grads.pop(op.output_id, None)
        if g is None:
            continue
        for t, gi in zip(op.inputs, op.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                t.grad = t.grad + gi
            elif t.node_id in grads:
                grads[t.node_id] = grads[t.node_id] + gi
            else:
                grads[t.node_id] = gi
    if not retain:
        tape.clear()
