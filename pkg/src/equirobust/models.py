"""
Model zoo: builds every architecture family from a `ModelSpec`, runs the
forward pass with per-layer finiteness checks, and reads/writes the
versioned binary checkpoint container.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import struct
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .layers import (BatchNorm2d, Conv2d, Dense, Flatten, Fusion, GlobalAvgPool, GroupBatchNorm, GroupPool,
                     MaxPool2d, Module, P4GroupConv, P4LiftConv, ReLU, ScaleEquivariantConv, Sequential)
from .schemas import ArchitectureId, ModelSpec, NamedModelSpec
from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, no_grad

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EQRB"
CHECKPOINT_VERSION = 1
CHECKPOINT_SCHEMA = "equirobust.checkpoint/1"
_DIGEST_SIZE = 32


class ArchitectureError(ValueError):
    """Unknown architecture id."""


class CheckpointError(Exception):
    """Checkpoint file cannot be read back as the model it claims to be."""


class ChecksumError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# --- composite stages ----------------------------------------------------

class RotationBranch(Module):
    """lift → group BN → ReLU → group conv → group pool: plain image out."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, padding_mode: str,
                 rng: np.random.Generator, lift_filters: int):
        super().__init__()
        self.lift = P4LiftConv(in_channels, lift_filters, kernel_size, padding_mode, rng)
        self.norm = GroupBatchNorm(lift_filters)
        self.act = ReLU()
        self.gconv = P4GroupConv(lift_filters, out_channels, kernel_size, padding_mode, rng)
        self.pool = GroupPool("max")
        self.out_channels = out_channels

    def forward(self, x):
        return self.pool(self.gconv(self.act(self.norm(self.lift(x)))))


class ParallelStage(Module):
    """Branches run side by side on the same input and are fused."""

    def __init__(self, branches: Sequence[Module], out_widths: Sequence[int], mode: str = "concat"):
        super().__init__()
        self.branches = Sequential(*branches)
        self.fusion = Fusion(len(branches), mode)
        self.out_channels = sum(out_widths) if mode == "concat" else out_widths[0]

    def forward(self, x):
        return self.fusion([branch(x) for branch in self.branches])


class CascadedStage(Module):
    """standard conv → rotation stage (lift, group pool) → scale stage, in sequence."""

    def __init__(self, in_channels: int, width: int, kernel_size: int, padding_mode: str, factors: Sequence[float],
                 aggregation: str, branch_weights, rng: np.random.Generator):
        super().__init__()
        std_width = max(1, width // 2)
        rot_filters = max(1, width // 4)
        self.conv = Conv2d(in_channels, std_width, kernel_size, padding_mode, rng)
        self.act = ReLU()
        self.lift = P4LiftConv(std_width, rot_filters, kernel_size, padding_mode, rng)
        self.norm = GroupBatchNorm(rot_filters)
        self.rot_act = ReLU()
        self.pool = GroupPool("max")
        per_branch = _scale_branch_width(width, len(factors), aggregation, branch_weights)
        self.scale = ScaleEquivariantConv(rot_filters, per_branch, factors, kernel_size, aggregation,
                                          branch_weights, padding_mode, rng)
        self.out_channels = self.scale.out_channels

    def forward(self, x):
        h = self.act(self.conv(x))
        h = self.pool(self.rot_act(self.norm(self.lift(h))))
        return self.scale(h)


def _scale_branch_width(target: int, n_factors: int, aggregation: str, branch_weights) -> int:
    if aggregation == "concat" and branch_weights is None:
        return max(1, target // n_factors)
    return max(1, target)


# --- model ---------------------------------------------------------------

class Model(Module):
    """Realised network: an ordered layer list plus the spec it was built from."""

    def __init__(self, spec: ModelSpec, layers: Sequence[Module]):
        super().__init__()
        if isinstance(spec, NamedModelSpec):
            spec = spec.to_spec()
        self.spec = spec
        self.layers = Sequential(*layers)

    @property
    def architecture_id(self) -> str:
        return str(self.spec.architecture_id)

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.spec.in_channels, self.spec.image_size, self.spec.image_size)

    @property
    def metadata(self) -> dict:
        return {
            "spec": self.spec.model_dump(mode="json"),
            "spec_digest": self.spec.digest(),
            "parameter_count": self.num_parameters(),
            "seed": self.spec.seed,
        }

    def _check_input(self, x: Tensor) -> None:
        c, _, _ = self.input_shape
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError("model.forward", x.shape, detail=f"expected (N, {c}, H, W)")
        h, w = x.shape[-2:]
        m = minimum_input_size(self.spec)
        if h < m or w < m or h % m or w % m:
            raise ShapeError("model.forward", x.shape, detail=f"spatial size must be a positive multiple of {m}")

    def forward(self, x) -> Tensor:
        x = as_tensor(x)
        self._check_input(x)
        for index, layer in enumerate(self.layers):
            x = layer(x)
            if not np.all(np.isfinite(x.data)):
                raise NonFiniteError(f"non-finite activation after layer {index} ({type(layer).__name__})",
                                     layer_index=index)
        return x

    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Logits for an (N, C, H, W) array, computed without a tape."""
        outs = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                outs.append(self.forward(images[start:start + batch_size]).data)
        if not outs:
            return np.zeros((0, self.num_classes))
        return np.concatenate(outs, axis=0)


def forward(model: Model, x) -> Tensor:
    return model(x)


def minimum_input_size(spec: ModelSpec) -> int:
    if spec.architecture_id == ArchitectureId.LINEAR:
        return 1
    return 2 ** (spec.depth // 2)


# --- builders ------------------------------------------------------------

def _block_tail(index: int, width: int) -> list[Module]:
    tail: list[Module] = [BatchNorm2d(width), ReLU()]
    if index % 2 == 1:
        tail.append(MaxPool2d(2))
    return tail


def _standard_stack(spec: ModelSpec, in_width: int, rng: np.random.Generator, start: int = 1) -> list[Module]:
    layers: list[Module] = []
    for i in range(start, spec.depth):
        width = spec.channel_plan[i]
        layers.append(Conv2d(in_width, width, spec.kernel_size, spec.padding_mode, rng))
        layers.extend(_block_tail(i, width))
        in_width = width
    layers += [GlobalAvgPool(), Dense(in_width, spec.num_classes, rng)]
    return layers


def _with_first_stage(spec: ModelSpec, stage: Module, rng: np.random.Generator) -> list[Module]:
    width = stage.out_channels
    return [stage, *_block_tail(0, width), *_standard_stack(spec, width, rng)]


def _build_baseline(spec: ModelSpec, rng: np.random.Generator) -> list[Module]:
    w0 = spec.channel_plan[0]
    stem = Conv2d(spec.in_channels, w0, spec.kernel_size, spec.padding_mode, rng)
    return _with_first_stage(spec, stem, rng)


def _standard_branch(spec: ModelSpec, width: int, rng) -> Conv2d:
    return Conv2d(spec.in_channels, width, spec.kernel_size, spec.padding_mode, rng)


def _scale_branch(spec: ModelSpec, target: int, rng, aggregation: str | None = None) -> ScaleEquivariantConv:
    scales = spec.scale_set
    aggregation = aggregation or str(scales.aggregation)
    per_branch = _scale_branch_width(target, len(scales.factors), aggregation, scales.branch_weights)
    return ScaleEquivariantConv(spec.in_channels, per_branch, scales.factors, spec.kernel_size, aggregation,
                                scales.branch_weights, spec.padding_mode, rng)


def rotation_lift_filters(stage_width: int) -> int:
    """Orientation filters lifted by a rotation branch: a quarter of the first-stage width."""
    return max(1, stage_width // 4)


def _build_parallel_rot(spec: ModelSpec, rng) -> list[Module]:
    w0 = spec.channel_plan[0]
    rot_width = max(1, w0 // 2)
    standard = _standard_branch(spec, w0 - rot_width, rng)
    rotation = RotationBranch(spec.in_channels, rot_width, spec.kernel_size, spec.padding_mode, rng,
                              lift_filters=rotation_lift_filters(w0))
    stage = ParallelStage([standard, rotation], [w0 - rot_width, rot_width])
    return _with_first_stage(spec, stage, rng)


def _build_parallel_scale(spec: ModelSpec, rng) -> list[Module]:
    w0 = spec.channel_plan[0]
    scale = _scale_branch(spec, max(1, w0 // 2), rng)
    std_width = max(1, w0 - scale.out_channels)
    standard = _standard_branch(spec, std_width, rng)
    stage = ParallelStage([standard, scale], [std_width, scale.out_channels])
    return _with_first_stage(spec, stage, rng)


def _build_parallel_rot_scale(spec: ModelSpec, rng) -> list[Module]:
    w0 = spec.channel_plan[0]
    rot_width = max(1, w0 // 4)
    rotation = RotationBranch(spec.in_channels, rot_width, spec.kernel_size, spec.padding_mode, rng,
                              lift_filters=rotation_lift_filters(w0))
    scale = _scale_branch(spec, max(1, w0 // 4), rng)
    std_width = max(1, w0 - rot_width - scale.out_channels)
    standard = _standard_branch(spec, std_width, rng)
    stage = ParallelStage([standard, rotation, scale], [std_width, rot_width, scale.out_channels])
    return _with_first_stage(spec, stage, rng)


def _build_weighted_parallel(spec: ModelSpec, rng) -> list[Module]:
    w0 = spec.channel_plan[0]
    standard = _standard_branch(spec, w0, rng)
    rotation = RotationBranch(spec.in_channels, w0, spec.kernel_size, spec.padding_mode, rng,
                              lift_filters=rotation_lift_filters(w0))
    scale = _scale_branch(spec, w0, rng, aggregation="average")
    stage = ParallelStage([standard, rotation, scale], [w0, w0, w0], mode="weighted_sum")
    return _with_first_stage(spec, stage, rng)


def _build_cascaded(spec: ModelSpec, rng) -> list[Module]:
    scales = spec.scale_set
    stage = CascadedStage(spec.in_channels, spec.channel_plan[0], spec.kernel_size, spec.padding_mode,
                          scales.factors, str(scales.aggregation), scales.branch_weights, rng)
    return _with_first_stage(spec, stage, rng)


def equivariant_filters(width: int) -> int:
    """Orientation filters per layer that keep a P4 stack's parameters level with a width-`width` CNN."""
    return max(1, math.ceil(width / 2))


def _build_fully_equivariant(spec: ModelSpec, rng) -> list[Module]:
    layers: list[Module] = []
    in_filters = 0
    for i, width in enumerate(spec.channel_plan):
        filters = equivariant_filters(width)
        if i == 0:
            layers.append(P4LiftConv(spec.in_channels, filters, spec.kernel_size, spec.padding_mode, rng))
        else:
            layers.append(P4GroupConv(in_filters, filters, spec.kernel_size, spec.padding_mode, rng))
        layers += [GroupBatchNorm(filters), ReLU()]
        if i % 2 == 1:
            layers.append(MaxPool2d(2))
        in_filters = filters
    layers += [GroupPool("max"), GlobalAvgPool(), Dense(in_filters, spec.num_classes, rng)]
    return layers


def _build_linear(spec: ModelSpec, rng) -> list[Module]:
    d = spec.in_channels * spec.image_size * spec.image_size
    return [Flatten(), Dense(d, spec.num_classes, rng)]


_BUILDERS: dict[str, Callable[[ModelSpec, np.random.Generator], list[Module]]] = {
    ArchitectureId.BASELINE.value: _build_baseline,
    ArchitectureId.PARALLEL_ROT.value: _build_parallel_rot,
    ArchitectureId.PARALLEL_SCALE.value: _build_parallel_scale,
    ArchitectureId.PARALLEL_ROT_SCALE.value: _build_parallel_rot_scale,
    ArchitectureId.CASCADED.value: _build_cascaded,
    ArchitectureId.WEIGHTED_PARALLEL.value: _build_weighted_parallel,
    ArchitectureId.FULLY_EQUIVARIANT.value: _build_fully_equivariant,
    ArchitectureId.LINEAR.value: _build_linear,
}


def build(spec: ModelSpec) -> Model:
    """Construct the network described by `spec`, in eval mode."""
    arch = getattr(spec.architecture_id, "value", spec.architecture_id)
    builder = _BUILDERS.get(arch)
    if builder is None:
        raise ArchitectureError(f"unknown architecture_id {arch!r}; known: {sorted(_BUILDERS)}")
    rng = np.random.default_rng(spec.seed)
    model = Model(spec, builder(spec, rng))
    model.eval()
    logger.debug("built %s with %d parameters", arch, model.num_parameters())
    return model


def parameter_count(spec: ModelSpec) -> int:
    return build(spec).num_parameters()


def contains_standard_conv(model: Module) -> bool:
    return any(isinstance(m, Conv2d) for m in model.modules())


# --- checkpoints ---------------------------------------------------------
#
# MAGIC | u16 version | u32 len | header json {schema, spec} | sha256(header json)
#   | u32 count | (u16 len, name, u8 ndim, u32 dims..., <f8 data)* | sha256(all above)

def _pack_array(buf: io.BytesIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<B", array.ndim))
    buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
    buf.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def save(model: Model, path: str | Path) -> str:
    """Write a checkpoint; returns the hex SHA-256 of the file."""
    header = {"schema": CHECKPOINT_SCHEMA, "spec": model.spec.model_dump(mode="json")}
    header_json = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", CHECKPOINT_VERSION, len(header_json)))
    buf.write(header_json)
    buf.write(hashlib.sha256(header_json).digest())
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    arrays += list(model.named_buffers())
    buf.write(struct.pack("<I", len(arrays)))
    for name, array in arrays:
        _pack_array(buf, name, array)
    body = buf.getvalue()
    payload = body + hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return hashlib.sha256(payload).hexdigest()


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ChecksumError("checkpoint ends early")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: str | Path, spec: ModelSpec | None = None) -> Model:
    """Read a checkpoint written by `save`.

    With `spec` given, the stored spec digest must equal `spec.digest()`.
    """
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + _DIGEST_SIZE:
        raise ChecksumError(f"{path}: file too short to be a checkpoint")
    body, trailer = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != trailer:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupted file)")

    reader = _Reader(body)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not an equirobust checkpoint")
    version, header_len = reader.unpack("<HI")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    header_json = reader.take(header_len)
    if hashlib.sha256(header_json).digest() != reader.take(_DIGEST_SIZE):
        raise SpecMismatchError(f"{path}: stored header does not match its digest")
    header = json.loads(header_json)
    schema = header.get("schema") if isinstance(header, dict) else None
    if schema != CHECKPOINT_SCHEMA:
        raise CheckpointVersionError(f"{path}: checkpoint schema {schema!r}, this build reads {CHECKPOINT_SCHEMA!r}")
    stored = ModelSpec(**header["spec"])
    if spec is not None and spec.digest() != stored.digest():
        raise SpecMismatchError(f"{path}: checkpoint spec {stored.digest()[:12]} != requested {spec.digest()[:12]}")

    (count,) = reader.unpack("<I")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        (ndim,) = reader.unpack("<B")
        shape = reader.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        state[name] = np.frombuffer(reader.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)

    model = build(stored)
    try:
        model.load_state_dict(state)
    except (KeyError, ShapeError) as exc:
        raise SpecMismatchError(f"{path}: arrays do not fit the stored spec: {exc}") from exc
    model.eval()
    return model


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
