"""
Dense tensors with a reverse-mode differentiation tape.

Every differentiable operation is a `Function` subclass: `forward` works on raw
numpy arrays, `backward` maps the upstream gradient to one gradient per input.
`Function.apply` wraps the result in a `Tensor` that remembers its creator, and
`Tape` replays the recorded operations in reverse topological order.

Layout convention for images is channels-first (N, C, H, W); spatial operations
always act on the last two axes so they also apply to (N, K, 4, H, W) maps.
"""

from __future__ import annotations

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple, detail: str = ""):
        listed = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{op}: incompatible shapes {listed}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)
        self.op = op
        self.shapes = shapes


class BackwardError(RuntimeError):
    """Backward requested on a non-scalar output or an already consumed tape."""


class NonFiniteError(FloatingPointError):
    """A forward or gradient computation produced NaN or Inf."""

    def __init__(self, message: str, layer_index: int | None = None):
        super().__init__(message)
        self.layer_index = layer_index


def get_default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float64))


@contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (float32 training mode)."""
    previous = get_default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so that `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """Base class for differentiable operations."""

    name = "op"

    def __init__(self, *inputs: "Tensor"):
        self.inputs = inputs
        self.consumed = False

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} has no forward pass")

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError(f"{type(self).__name__} has no backward pass")

    def release(self) -> None:
        """Drop arrays saved for the backward pass."""
        self.__dict__ = {"inputs": (), "consumed": True}

    @classmethod
    def apply(cls, *inputs: "Tensor", **kwargs) -> "Tensor":
        fn = cls(*inputs)
        data = fn.forward(*(t.data for t in inputs), **kwargs)
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(data, requires_grad=requires_grad, _creator=fn if requires_grad else None)


class Tensor:
    """N-dimensional float array that can take part in a differentiation tape."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None,
                 _creator: Function | None = None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype, copy=False)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(get_default_dtype())
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._creator = _creator

    # --- basic properties -------------------------------------------------
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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- arithmetic ------------------------------------------------------
    def _lift(self, other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))

    def __add__(self, other):
        return Add.apply(self, self._lift(other))

    def __radd__(self, other):
        return Add.apply(self._lift(other), self)

    def __sub__(self, other):
        return Sub.apply(self, self._lift(other))

    def __rsub__(self, other):
        return Sub.apply(self._lift(other), self)

    def __mul__(self, other):
        return Mul.apply(self, self._lift(other))

    def __rmul__(self, other):
        return Mul.apply(self._lift(other), self)

    def __truediv__(self, other):
        return Div.apply(self, self._lift(other))

    def __rtruediv__(self, other):
        return Div.apply(self._lift(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return PowScalar.apply(self, exponent=float(exponent))

    def __matmul__(self, other):
        return MatMul.apply(self, self._lift(other))

    def __getitem__(self, index):
        return GetItem.apply(self, index=index)

    # --- reductions and shape ops ----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = _normalize_axes(axis, self.ndim)
        count = int(np.prod([self.shape[a] for a in axes])) if axes else 1
        return Sum.apply(self, axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int) -> "Tensor":
        return MaxAxis.apply(self, axis=axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    def relu(self) -> "Tensor":
        return ReLU.apply(self)

    def exp(self) -> "Tensor":
        return Exp.apply(self)

    def log(self) -> "Tensor":
        return Log.apply(self)

    def sqrt(self) -> "Tensor":
        return Sqrt.apply(self)


def _normalize_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def as_tensor(value, requires_grad: bool = False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=get_default_dtype()), requires_grad=requires_grad)


# --- elementwise ---------------------------------------------------------

class Add(Function):
    name = "add"

    def forward(self, x, y):
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise ShapeError(self.name, x.shape, y.shape) from None
        self.shapes = (x.shape, y.shape)
        return x + y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, x, y):
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise ShapeError(self.name, x.shape, y.shape) from None
        self.shapes = (x.shape, y.shape)
        return x - y

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, x, y):
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise ShapeError(self.name, x.shape, y.shape) from None
        self.x, self.y = x, y
        return x * y

    def backward(self, grad):
        return _unbroadcast(grad * self.y, self.x.shape), _unbroadcast(grad * self.x, self.y.shape)


class Div(Function):
    name = "div"

    def forward(self, x, y):
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError:
            raise ShapeError(self.name, x.shape, y.shape) from None
        self.x, self.y = x, y
        return x / y

    def backward(self, grad):
        gx = grad / self.y
        gy = -grad * self.x / (self.y * self.y)
        return _unbroadcast(gx, self.x.shape), _unbroadcast(gy, self.y.shape)


class Neg(Function):
    name = "neg"

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class PowScalar(Function):
    name = "pow"

    def forward(self, x, exponent: float):
        self.x, self.exponent = x, exponent
        return x ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.x ** (self.exponent - 1.0),)


class Exp(Function):
    name = "exp"

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    name = "log"

    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


class MatMul(Function):
    name = "matmul"

    def forward(self, x, y):
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ShapeError(self.name, x.shape, y.shape)
        self.x, self.y = x, y
        return x @ y

    def backward(self, grad):
        return grad @ self.y.T, self.x.T @ grad


# --- reductions ----------------------------------------------------------

class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape = x.shape
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return np.asarray(x.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class MaxAxis(Function):
    """Maximum along one axis; the gradient goes to the first maximal entry."""

    name = "max"

    def forward(self, x, axis: int):
        self.axis = axis % x.ndim
        self.shape = x.shape
        self.index = np.expand_dims(np.argmax(x, axis=self.axis), self.axis)
        return np.take_along_axis(x, self.index, axis=self.axis).squeeze(self.axis)

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(out, self.index, np.expand_dims(grad, self.axis), axis=self.axis)
        return (out,)


# --- shape ---------------------------------------------------------------

class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(self.name, x.shape, shape) from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(self.name, x.shape, detail=f"axes {axes}")
        self.inverse = tuple(np.argsort(axes))
        return np.transpose(x, axes)

    def backward(self, grad):
        return (np.transpose(grad, self.inverse),)


class GetItem(Function):
    name = "getitem"

    def forward(self, x, index):
        self.shape, self.index = x.shape, index
        return np.asarray(x[index])

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int = 0):
        ref = arrays[0]
        axis = axis % ref.ndim
        for a in arrays[1:]:
            if a.ndim != ref.ndim or any(a.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis):
                raise ShapeError(self.name, *(b.shape for b in arrays), detail=f"axis {axis}")
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class Stack(Function):
    name = "stack"

    def forward(self, *arrays, axis: int = 0):
        if any(a.shape != arrays[0].shape for a in arrays):
            raise ShapeError(self.name, *(a.shape for a in arrays))
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.moveaxis(grad, self.axis, 0))


class Rot90(Function):
    """Rotation by k·90° of the given plane; its adjoint is rotation by -k·90°."""

    name = "rot90"

    def forward(self, x, k: int = 1, axes=(-2, -1)):
        self.k, self.axes = k % 4, axes
        return np.ascontiguousarray(np.rot90(x, self.k, axes=axes))

    def backward(self, grad):
        return (np.ascontiguousarray(np.rot90(grad, -self.k, axes=self.axes)),)


class Roll(Function):
    name = "roll"

    def forward(self, x, shift: int, axis: int):
        self.shift, self.axis = shift, axis
        return np.roll(x, shift, axis=axis)

    def backward(self, grad):
        return (np.roll(grad, -self.shift, axis=self.axis),)


class Pad2d(Function):
    """Zero or reflection padding of the last two axes."""

    name = "pad2d"

    def forward(self, x, padding: int, mode: str = "zeros"):
        if x.ndim < 2:
            raise ShapeError(self.name, x.shape, detail="needs at least two axes")
        self.shape, self.padding, self.mode = x.shape, padding, mode
        p = padding
        if mode == "zeros":
            width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
            return np.pad(x, width)
        if mode == "reflect":
            h, w = x.shape[-2:]
            if p >= h or p >= w:
                raise ShapeError(self.name, x.shape, detail=f"reflect padding {p} exceeds extent")
            self.rows = np.pad(np.arange(h), p, mode="reflect")
            self.cols = np.pad(np.arange(w), p, mode="reflect")
            return x[..., self.rows[:, None], self.cols[None, :]]
        raise ValueError(f"pad2d: unknown padding mode {mode!r}")

    def backward(self, grad):
        p = self.padding
        if self.mode == "zeros":
            h, w = self.shape[-2:]
            return (grad[..., p:p + h, p:p + w],)
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, (Ellipsis, self.rows[:, None], self.cols[None, :]), grad)
        return (out,)


# --- convolution and pooling ---------------------------------------------

class Conv2dValid(Function):
    """Cross-correlation with stride 1 and no padding: (N,C,H,W) x (K,C,k,k) -> (N,K,H-k+1,W-k+1)."""

    name = "conv2d"

    def forward(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise ShapeError(self.name, x.shape, w.shape)
        kh, kw = w.shape[2:]
        ho, wo = x.shape[2] - kh + 1, x.shape[3] - kw + 1
        if ho < 1 or wo < 1:
            raise ShapeError(self.name, x.shape, w.shape, detail="kernel larger than input")
        self.x, self.w = x, w
        out = np.zeros((x.shape[0], w.shape[0], ho, wo), dtype=np.result_type(x, w))
        for i in range(kh):
            for j in range(kw):
                out += np.einsum("nchw,kc->nkhw", x[:, :, i:i + ho, j:j + wo], w[:, :, i, j], optimize=True)
        return out

    def backward(self, grad):
        x, w = self.x, self.w
        kh, kw = w.shape[2:]
        ho, wo = grad.shape[2:]
        gx = np.zeros_like(x, dtype=grad.dtype)
        gw = np.zeros_like(w, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += np.einsum("nkhw,kc->nchw", grad, w[:, :, i, j], optimize=True)
                gw[:, :, i, j] = np.einsum("nkhw,nchw->kc", grad, x[:, :, i:i + ho, j:j + wo], optimize=True)
        return gx, gw


class _Pool2d(Function):
    def _windows(self, x, size: int) -> np.ndarray:
        h, w = x.shape[-2:]
        if h % size or w % size:
            raise ShapeError(self.name, x.shape, detail=f"spatial size not divisible by {size}")
        self.shape, self.size = x.shape, size
        lead = x.shape[:-2]
        blocks = x.reshape(lead + (h // size, size, w // size, size))
        nd = len(lead)
        blocks = np.moveaxis(blocks, nd + 1, nd + 2)
        return blocks.reshape(lead + (h // size, w // size, size * size))

    def _unwindow(self, grad_windows: np.ndarray) -> np.ndarray:
        lead = self.shape[:-2]
        h, w = self.shape[-2:]
        s = self.size
        nd = len(lead)
        blocks = grad_windows.reshape(lead + (h // s, w // s, s, s))
        blocks = np.moveaxis(blocks, nd + 2, nd + 1)
        return blocks.reshape(self.shape)


class MaxPool2d(_Pool2d):
    name = "max_pool2d"

    def forward(self, x, size: int = 2):
        windows = self._windows(x, size)
        self.index = np.argmax(windows, axis=-1)[..., None]
        return np.take_along_axis(windows, self.index, axis=-1)[..., 0]

    def backward(self, grad):
        gw = np.zeros(grad.shape + (self.size * self.size,), dtype=grad.dtype)
        np.put_along_axis(gw, self.index, grad[..., None], axis=-1)
        return (self._unwindow(gw),)


class AvgPool2d(_Pool2d):
    name = "avg_pool2d"

    def forward(self, x, size: int = 2):
        return self._windows(x, size).mean(axis=-1)

    def backward(self, grad):
        s2 = self.size * self.size
        gw = np.repeat(grad[..., None] / s2, s2, axis=-1)
        return (self._unwindow(gw),)


def interpolation_matrix(n_in: int, n_out: int, mode: str = "bilinear", dtype=np.float64) -> np.ndarray:
    """Row-stochastic (n_out, n_in) resampling matrix with half-pixel centres."""
    matrix = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    centres = (np.arange(n_out) + 0.5) * scale
    if mode == "nearest":
        src = np.minimum(np.floor(centres).astype(int), n_in - 1)
        matrix[np.arange(n_out), src] = 1.0
        return matrix
    if mode != "bilinear":
        raise ValueError(f"resize: unknown mode {mode!r}")
    src = np.clip(centres - 0.5, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    np.add.at(matrix, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(matrix, (np.arange(n_out), hi), frac)
    return matrix


class Resize(Function):
    """Separable resampling of the last two axes."""

    name = "resize"

    def forward(self, x, size: tuple, mode: str = "bilinear"):
        h, w = x.shape[-2:]
        self.same = (h, w) == tuple(size)
        if self.same:
            return x.copy()
        self.mh = interpolation_matrix(h, size[0], mode, x.dtype)
        self.mw = interpolation_matrix(w, size[1], mode, x.dtype)
        return np.einsum("oh,...hw,pw->...op", self.mh, x, self.mw, optimize=True)

    def backward(self, grad):
        if self.same:
            return (grad,)
        return (np.einsum("oh,...op,pw->...hw", self.mh, grad, self.mw, optimize=True),)


# --- softmax family ------------------------------------------------------

class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis: int = -1):
        self.axis = axis
        shifted = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


class SoftmaxCrossEntropy(Function):
    """Fused log-softmax + negative log-likelihood over integer labels."""

    name = "cross_entropy"

    def forward(self, logits, labels: np.ndarray, reduction: str = "mean"):
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(self.name, logits.shape, labels.shape)
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        self.prob = np.exp(log_p)
        self.labels = labels
        self.reduction = reduction
        losses = -log_p[np.arange(len(labels)), labels]
        if reduction == "none":
            return losses
        if reduction == "sum":
            return np.asarray(losses.sum())
        return np.asarray(losses.mean())

    def backward(self, grad):
        delta = self.prob.copy()
        delta[np.arange(len(self.labels)), self.labels] -= 1.0
        if self.reduction == "none":
            return (delta * grad[:, None],)
        if self.reduction == "mean":
            delta /= len(self.labels)
        return (delta * grad,)


# --- functional front end -------------------------------------------------

def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*tensors, axis=axis)


def rot90(x: Tensor, k: int = 1, axes=(-2, -1)) -> Tensor:
    return Rot90.apply(x, k=k, axes=axes)


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    return Roll.apply(x, shift=shift, axis=axis)


def pad2d(x: Tensor, padding: int, mode: str = "zeros") -> Tensor:
    if padding == 0:
        return x
    return Pad2d.apply(x, padding=padding, mode=mode)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0,
           padding_mode: str = "zeros") -> Tensor:
    out = Conv2dValid.apply(pad2d(x, padding, padding_mode), weight)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    return MaxPool2d.apply(x, size=size)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    return AvgPool2d.apply(x, size=size)


def resize(x: Tensor, size: tuple[int, int], mode: str = "bilinear") -> Tensor:
    return Resize.apply(x, size=tuple(int(s) for s in size), mode=mode)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    return SoftmaxCrossEntropy.apply(logits, labels=np.asarray(labels, dtype=np.int64), reduction=reduction)


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Σ_i weights[i] · tensors[i] for a 1-D weight tensor."""
    if weights.shape != (len(tensors),):
        raise ShapeError("weighted_sum", weights.shape, detail=f"{len(tensors)} branches")
    total = None
    for i, t in enumerate(tensors):
        term = weights[i] * t
        total = term if total is None else total + term
    return total


# --- tape ----------------------------------------------------------------

class Tape:
    """Ordered record of the operations that produced `output`.

    Entries are stored in topological order; `backward` replays the local
    adjoint rules in reverse and then releases them, so a tape can be consumed
    once per forward pass. A leaf output records no operations: its backward
    only sets `.grad` to ones and may be repeated.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.entries = self._record(output)

    @staticmethod
    def _record(output: Tensor) -> list[Tensor]:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._creator is not None:
                for parent in node._creator.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))
        return order

    def backward(self) -> dict[Tensor, np.ndarray]:
        output = self.output
        if output.size != 1:
            raise BackwardError(f"backward needs a scalar output, got shape {output.shape}")
        if not output.requires_grad:
            raise BackwardError("backward on a tensor that does not require gradients")
        if output._creator is not None and output._creator.consumed:
            raise BackwardError("tape already consumed; run a fresh forward pass before calling backward again")

        grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.entries):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            fn = node._creator
            if fn is None:
                leaves[node] = grad
                continue
            for parent, parent_grad in zip(fn.inputs, fn.backward(grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad
            fn.release()

        for leaf, grad in leaves.items():
            leaf.grad = grad
        return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Populate `.grad` on every leaf reachable from the scalar `loss`."""
    return Tape(loss).backward()


def input_gradient(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the scalar `fn(x)` with respect to the array `x`; returns (value, grad)."""
    leaf = Tensor(np.array(x, dtype=get_default_dtype()), requires_grad=True)
    out = fn(leaf)
    value = out.data.copy()
    backward(out)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return value, grad


def input_jacobian(model: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Jacobian (k, d) of the logits of a single input `x` (no batch axis).

    Row j is computed with its own forward/backward pass.
    """
    x = np.asarray(x, dtype=get_default_dtype())
    with no_grad():
        k = model(Tensor(x[None])).shape[1]
    rows = []
    for j in range(k):
        _, grad = input_gradient(lambda t, j=j: model(t.reshape((1,) + x.shape))[0, j], x)
        rows.append(grad.reshape(-1))
    jacobian = np.stack(rows)
    if not np.all(np.isfinite(jacobian)):
        raise NonFiniteError("input_jacobian: non-finite entries in the Jacobian")
    return jacobian


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn(x)
        flat[i] = orig - h
        minus = fn(x)
        flat[i] = orig
        gflat[i] = (plus - minus) / (2.0 * h)
    return grad
