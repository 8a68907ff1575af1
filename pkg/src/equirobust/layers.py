"""
Network layers, including the P4 rotation- and scale-equivariant blocks.

Layers are `Module` subclasses holding `Parameter` tensors; attribute
assignment registers parameters and sub-modules so a model can enumerate
them by dotted name for optimisers and checkpoints.
"""

from __future__ import annotations

import logging
import math
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .groups import ORIENTATIONS, check_p4_features
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)


class ScaleResizeError(ShapeError):
    """A scale branch would shrink the input below the kernel size."""

    def __init__(self, alpha: float, resized: tuple, kernel_size: int):
        super().__init__("scale_equivariant_conv", resized,
                         detail=f"scale factor {alpha} resizes input to {resized}, below kernel size {kernel_size}")
        self.alpha = alpha


class FusionShapeError(ShapeError):
    """Branch outputs cannot be fused."""

    def __init__(self, mode: str, shapes: Sequence[tuple], detail: str):
        super().__init__(f"fuse[{mode}]", *shapes, detail=detail)


class Parameter(Tensor):
    """A leaf tensor that is trained."""

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)


class Module:
    """Base class: parameter/buffer/sub-module registry plus train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_parameters", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        array = np.array(value, dtype=np.float64)
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name][...] = value

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__} has no forward")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self) -> Iterator["Module"]:
        return iter(self._modules.values())

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._parameters.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for name, m in self._modules.items():
            yield from m.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for m in self._modules.values():
            yield from m.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing, extra = sorted(expected - set(state)), sorted(set(state) - expected)
            raise KeyError(f"state does not match module: missing={missing} unexpected={extra}")
        for name, value in state.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != value.shape:
                raise ShapeError("load_state_dict", target.shape, value.shape, detail=name)
            if name in params:
                params[name].data = np.array(value, dtype=target.dtype)
            else:
                target[...] = value

    def cast(self, dtype) -> "Module":
        """Change the dtype of every parameter (buffers stay float64)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def extra_repr(self) -> str:
        return ""

    def __repr__(self) -> str:
        lines = [f"{type(self).__name__}({self.extra_repr()}"]
        for name, m in self._modules.items():
            lines.append(f"  ({name}): " + repr(m).replace("\n", "\n  "))
        return "\n".join(lines) + ")" if len(lines) > 1 else lines[0] + ")"


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._modules.values())

    def __len__(self) -> int:
        return len(self._modules)

    def __getitem__(self, index: int) -> Module:
        return list(self._modules.values())[index]

    def forward(self, x):
        for layer in self:
            x = layer(x)
        return x


# --- standard layers -----------------------------------------------------

class Conv2d(Module):
    """Stride-1 same-size convolution (odd kernel)."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 padding_mode: str = "zeros", rng: np.random.Generator | None = None):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {kernel_size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.padding_mode = kernel_size, padding_mode
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels))

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, padding=self.kernel_size // 2,
                        padding_mode=self.padding_mode)

    def extra_repr(self) -> str:
        return f"{self.in_channels}, {self.out_channels}, k={self.kernel_size}, {self.padding_mode}"


class _BatchNorm(Module):
    """Batch normalisation over every axis except the filter axis 1."""

    feature_ndim = 4

    def __init__(self, num_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.num_features, self.eps, self.momentum = num_features, eps, momentum
        self.weight = Parameter(np.ones(num_features))
        self.bias = Parameter(np.zeros(num_features))
        self.register_buffer("running_mean", np.zeros(num_features))
        self.register_buffer("running_var", np.ones(num_features))

    def _check(self, x: Tensor) -> None:
        if x.ndim != self.feature_ndim or x.shape[1] != self.num_features:
            raise ShapeError(type(self).__name__, x.shape, detail=f"{self.num_features} filters on axis 1")

    def forward(self, x: Tensor) -> Tensor:
        self._check(x)
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, self.num_features) + (1,) * (x.ndim - 2)
        if self.training:
            mean = x.mean(axis=axes, keepdims=True)
            centred = x - mean
            var = (centred * centred).mean(axis=axes, keepdims=True)
            n = x.size // self.num_features
            unbiased = var.data.reshape(-1) * (n / max(n - 1, 1))
            self.set_buffer("running_mean", (1 - self.momentum) * self.running_mean
                            + self.momentum * mean.data.reshape(-1))
            self.set_buffer("running_var", (1 - self.momentum) * self.running_var + self.momentum * unbiased)
            normed = centred / (var + self.eps).sqrt()
        else:
            mean = self.running_mean.reshape(bshape).astype(x.dtype)
            scale = 1.0 / np.sqrt(self.running_var.reshape(bshape) + self.eps)
            normed = (x - mean) * scale.astype(x.dtype)
        return normed * self.weight.reshape(bshape) + self.bias.reshape(bshape)

    def extra_repr(self) -> str:
        return str(self.num_features)


class BatchNorm2d(_BatchNorm):
    feature_ndim = 4


class GroupBatchNorm(_BatchNorm):
    """Batch norm for P4 maps: one statistic per filter K, shared by all orientations."""

    feature_ndim = 5

    def _check(self, x: Tensor) -> None:
        check_p4_features(x.shape, "group_batch_norm")
        super()._check(x)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class MaxPool2d(Module):
    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2d(x, self.size)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.mean(axis=(-2, -1)).reshape(x.shape[0], -1)


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x.reshape(x.shape[0], -1)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(rng.normal(0.0, math.sqrt(1.0 / in_features), size=(in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError("dense", x.shape, (self.in_features, self.out_features))
        return x @ self.weight + self.bias

    def extra_repr(self) -> str:
        return f"{self.in_features}, {self.out_features}"


# --- P4 rotation equivariance --------------------------------------------

def p4_lift_conv(x: Tensor, filters: Tensor, bias: Tensor | None = None,
                 padding_mode: str = "zeros") -> Tensor:
    """Correlate x with the filter bank rotated by r·90°, r = 0..3.

    (N, C, H, W) x (K, C, k, k) -> (N, K, 4, H, W); orientation r holds the
    response to rot90(filters, r).
    """
    if filters.ndim != 4 or filters.shape[-1] != filters.shape[-2]:
        raise ShapeError("p4_lift_conv", filters.shape, detail="kernel must be square (K, C, k, k)")
    k = filters.shape[-1]
    if k % 2 == 0:
        raise ShapeError("p4_lift_conv", filters.shape, detail="kernel size must be odd")
    n_filters = filters.shape[0]
    bank = T.stack([T.rot90(filters, r) for r in range(ORIENTATIONS)], axis=0)
    bank = bank.reshape(ORIENTATIONS * n_filters, *filters.shape[1:])
    out = T.conv2d(x, bank, padding=k // 2, padding_mode=padding_mode)
    n, _, h, w = out.shape
    out = out.reshape(n, ORIENTATIONS, n_filters, h, w).transpose(0, 2, 1, 3, 4)
    if bias is not None:
        out = out + bias.reshape(1, n_filters, 1, 1, 1)
    return out


def p4_group_conv(h: Tensor, filters: Tensor, bias: Tensor | None = None,
                  padding_mode: str = "zeros") -> Tensor:
    """Group correlation on P4 maps: (N, K, 4, H, W) x (K', K, 4, k, k) -> (N, K', 4, H, W).

    Output orientation r uses the filter rotated by r·90° with its input
    orientation axis cyclically shifted by r.
    """
    check_p4_features(h.shape, "p4_group_conv")
    if filters.ndim != 5 or filters.shape[2] != ORIENTATIONS or filters.shape[1] != h.shape[1]:
        raise ShapeError("p4_group_conv", h.shape, filters.shape,
                         detail="filters must be (K', K, 4, k, k) matching the input filters")
    if filters.shape[-1] != filters.shape[-2] or filters.shape[-1] % 2 == 0:
        raise ShapeError("p4_group_conv", filters.shape, detail="kernel must be square and odd")
    k_out, k_in, _, k, _ = filters.shape
    rotated = [T.roll(T.rot90(filters, r), shift=r, axis=2) for r in range(ORIENTATIONS)]
    bank = T.stack(rotated, axis=0).reshape(ORIENTATIONS * k_out, k_in * ORIENTATIONS, k, k)
    n, _, _, height, width = h.shape
    flat = h.reshape(n, k_in * ORIENTATIONS, height, width)
    out = T.conv2d(flat, bank, padding=k // 2, padding_mode=padding_mode)
    out = out.reshape(n, ORIENTATIONS, k_out, height, width).transpose(0, 2, 1, 3, 4)
    if bias is not None:
        out = out + bias.reshape(1, k_out, 1, 1, 1)
    return out


def group_pool(h: Tensor, mode: str = "max") -> Tensor:
    """Reduce the orientation axis: (N, K, 4, H, W) -> (N, K, H, W)."""
    check_p4_features(h.shape, "group_pool")
    if mode == "max":
        return h.max(axis=2)
    if mode == "mean":
        return h.mean(axis=2)
    raise ValueError(f"group_pool: unknown mode {mode!r}")


class P4LiftConv(Module):
    def __init__(self, in_channels: int, out_filters: int, kernel_size: int = 3,
                 padding_mode: str = "zeros", rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_filters = in_channels, out_filters
        self.kernel_size, self.padding_mode = kernel_size, padding_mode
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(_he_normal(rng, (out_filters, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_filters))

    def forward(self, x: Tensor) -> Tensor:
        return p4_lift_conv(x, self.weight, self.bias, self.padding_mode)

    def extra_repr(self) -> str:
        return f"{self.in_channels} -> {self.out_filters}x4, k={self.kernel_size}"


class P4GroupConv(Module):
    def __init__(self, in_filters: int, out_filters: int, kernel_size: int = 3,
                 padding_mode: str = "zeros", rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_filters, self.out_filters = in_filters, out_filters
        self.kernel_size, self.padding_mode = kernel_size, padding_mode
        fan_in = in_filters * ORIENTATIONS * kernel_size * kernel_size
        shape = (out_filters, in_filters, ORIENTATIONS, kernel_size, kernel_size)
        self.weight = Parameter(_he_normal(rng, shape, fan_in))
        self.bias = Parameter(np.zeros(out_filters))

    def forward(self, h: Tensor) -> Tensor:
        return p4_group_conv(h, self.weight, self.bias, self.padding_mode)

    def extra_repr(self) -> str:
        return f"{self.in_filters}x4 -> {self.out_filters}x4, k={self.kernel_size}"


class GroupPool(Module):
    def __init__(self, mode: str = "max"):
        super().__init__()
        self.mode = mode

    def forward(self, h: Tensor) -> Tensor:
        return group_pool(h, self.mode)

    def extra_repr(self) -> str:
        return self.mode


# --- scale equivariance --------------------------------------------------

class ScaleEquivariantConv(Module):
    """One shared filter bank applied to several resized copies of the input.

    Each branch resizes x by α, convolves, and resizes the response back to
    the input resolution. Branches are concatenated, averaged, or (when
    branch weights are given) combined as Σ w_s φ_s with learnable w_s.
    """

    def __init__(self, in_channels: int, out_channels: int, factors: Sequence[float],
                 kernel_size: int = 3, aggregation: str = "concat",
                 branch_weights: Optional[Sequence[float]] = None,
                 padding_mode: str = "zeros", rng: np.random.Generator | None = None):
        super().__init__()
        if not factors:
            raise ValueError("scale set needs at least one factor")
        if aggregation not in ("concat", "average"):
            raise ValueError(f"unknown aggregation {aggregation!r}")
        self.factors = [float(a) for a in factors]
        self.aggregation = aggregation
        self.kernel_size = kernel_size
        self.conv = Conv2d(in_channels, out_channels, kernel_size, padding_mode, rng)
        self.weighted = branch_weights is not None
        if self.weighted:
            if len(branch_weights) != len(self.factors):
                raise ValueError(f"{len(branch_weights)} branch weights for {len(self.factors)} factors")
            self.branch_weights = Parameter(np.asarray(branch_weights, dtype=np.float64))

    @property
    def out_channels(self) -> int:
        width = self.conv.out_channels
        if self.aggregation == "concat" and not self.weighted:
            return width * len(self.factors)
        return width

    def branch(self, x: Tensor, alpha: float) -> Tensor:
        return _scale_branch(x, alpha, self.kernel_size, self.conv)

    def forward(self, x: Tensor) -> Tensor:
        branches = [self.branch(x, alpha) for alpha in self.factors]
        return _aggregate(branches, self.aggregation, self.branch_weights if self.weighted else None)

    def extra_repr(self) -> str:
        return f"factors={self.factors}, {self.aggregation}{', weighted' if self.weighted else ''}"


def _scale_branch(x: Tensor, alpha: float, kernel_size: int, conv) -> Tensor:
    h, w = x.shape[-2:]
    size = (max(1, round(alpha * h)), max(1, round(alpha * w)))
    if min(size) < kernel_size:
        raise ScaleResizeError(alpha, size, kernel_size)
    return T.resize(conv(T.resize(x, size)), (h, w))


def _aggregate(branches: list[Tensor], aggregation: str, branch_weights: Tensor | None) -> Tensor:
    if branch_weights is not None:
        return T.weighted_sum(branches, branch_weights)
    if len(branches) == 1:
        return branches[0]
    if aggregation == "concat":
        return T.concat(branches, axis=1)
    total = branches[0]
    for b in branches[1:]:
        total = total + b
    return total * (1.0 / len(branches))


def scale_equivariant_conv(x: Tensor, filters: Tensor, factors: Sequence[float], bias: Tensor | None = None,
                           aggregation: str = "concat", branch_weights: Tensor | None = None,
                           padding_mode: str = "zeros") -> Tensor:
    """Functional form of `ScaleEquivariantConv` for explicit filter tensors."""
    k = filters.shape[-1]
    if k % 2 == 0:
        raise ShapeError("scale_equivariant_conv", filters.shape, detail="kernel size must be odd")

    def conv(t: Tensor) -> Tensor:
        return T.conv2d(t, filters, bias, padding=k // 2, padding_mode=padding_mode)

    branches = [_scale_branch(x, float(alpha), k, conv) for alpha in factors]
    return _aggregate(branches, aggregation, branch_weights)


# --- fusion --------------------------------------------------------------

def fuse(branches: Sequence[Tensor], mode: str = "concat", logits: Tensor | None = None) -> Tensor:
    """Combine branch outputs: channel concat, or Σ softmax(θ)_i · branch_i."""
    shapes = [b.shape for b in branches]
    if not branches:
        raise ValueError("fuse needs at least one branch")
    if any(len(s) != 4 for s in shapes):
        raise FusionShapeError(mode, shapes, "branches must be (N, C, H, W) images")
    if mode == "concat":
        if len({(s[0],) + tuple(s[2:]) for s in shapes}) != 1:
            raise FusionShapeError(mode, shapes, "batch and spatial dimensions differ")
        return T.concat(branches, axis=1)
    if mode == "weighted_sum":
        if len(set(shapes)) != 1:
            raise FusionShapeError(mode, shapes, "weighted_sum needs identical branch shapes")
        if logits is None:
            raise ValueError("weighted_sum fusion needs fusion logits")
        return T.weighted_sum(branches, T.softmax(logits, axis=0))
    raise ValueError(f"fuse: unknown mode {mode!r}")


class Fusion(Module):
    def __init__(self, n_branches: int, mode: str = "concat", init_logits: Sequence[float] | None = None):
        super().__init__()
        self.mode, self.n_branches = mode, n_branches
        if mode == "weighted_sum":
            init = np.zeros(n_branches) if init_logits is None else np.asarray(init_logits, dtype=np.float64)
            self.logits = Parameter(init)

    def weights(self) -> np.ndarray:
        """Current convex combination weights (weighted_sum mode)."""
        z = self.logits.data - np.max(self.logits.data)
        e = np.exp(z)
        return e / e.sum()

    def forward(self, branches: Sequence[Tensor]) -> Tensor:
        if len(branches) != self.n_branches:
            raise FusionShapeError(self.mode, [b.shape for b in branches],
                                   f"expected {self.n_branches} branches")
        return fuse(branches, self.mode, getattr(self, "logits", None))

    def extra_repr(self) -> str:
        return f"{self.mode}, branches={self.n_branches}"
