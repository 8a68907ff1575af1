"""
Finite symmetry groups acting on images and feature maps.

A `GroupAction` knows how one of its elements transforms an input image
(T_g) and a feature map (ρ(g)). Images are (..., H, W); P4 feature maps are
(N, K, 4, H, W) with the orientation axis third from the end.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Hashable, Sequence

import numpy as np

from .tensor import ShapeError, interpolation_matrix

logger = logging.getLogger(__name__)

ORIENTATIONS = 4
ORIENTATION_AXIS = -3


class GroupShapeError(ShapeError):
    """A feature map does not carry the orientation axis a group layer expects."""


def check_p4_features(h_shape: tuple, op: str) -> None:
    if len(h_shape) != 5 or h_shape[2] != ORIENTATIONS:
        raise GroupShapeError(op, h_shape, detail="expected (N, K, 4, H, W) with 4 orientation channels")


class GroupAction(ABC):
    """One finite (or finitely sampled) transformation group."""

    group_id: str = "group"
    inverse_jacobian_kind: str = "orthogonal-permutation"

    @property
    @abstractmethod
    def elements(self) -> list[Hashable]:
        ...

    @property
    def order(self) -> int:
        return len(self.elements)

    @property
    def identity(self) -> Hashable:
        return self.elements[0]

    @abstractmethod
    def compose(self, a, b):
        """Element a∘b (apply b first, then a)."""

    @abstractmethod
    def inverse(self, a):
        ...

    @abstractmethod
    def act_input(self, g, x: np.ndarray) -> np.ndarray:
        """T_g on an image array (..., H, W)."""

    def act_features(self, g, h: np.ndarray) -> np.ndarray:
        """ρ(g) on a feature map; plain image maps transform like inputs."""
        return self.act_input(g, h)

    def align(self, g, field: np.ndarray) -> np.ndarray:
        """Map a gradient field evaluated at g·x back to the frame of x."""
        return self.act_input(self.inverse(g), field)

    def orbit(self, x: np.ndarray) -> list[np.ndarray]:
        return [self.act_input(g, x) for g in self.elements]

    def __repr__(self) -> str:
        return f"{type(self).__name__}(order={self.order})"


class TrivialGroup(GroupAction):
    """The one-element group; every action is the identity."""

    group_id = "trivial"

    @property
    def elements(self) -> list[int]:
        return [0]

    def compose(self, a, b):
        return 0

    def inverse(self, a):
        return 0

    def act_input(self, g, x):
        return np.array(x, copy=True)


class P4Group(GroupAction):
    """Planar rotations by multiples of 90°, acting by pixel permutation.

    Element r is the counter-clockwise rotation by r·90° (numpy's rot90
    convention on the last two axes). On P4 feature maps ρ(r) rotates every
    plane and cyclically shifts the orientation axis by r.
    """

    group_id = "P4"
    inverse_jacobian_kind = "orthogonal-permutation"

    @property
    def elements(self) -> list[int]:
        return list(range(ORIENTATIONS))

    def compose(self, a: int, b: int) -> int:
        return (a + b) % ORIENTATIONS

    def inverse(self, a: int) -> int:
        return (-a) % ORIENTATIONS

    def act_input(self, g: int, x: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(np.rot90(x, g % ORIENTATIONS, axes=(-2, -1)))

    def act_features(self, g: int, h: np.ndarray) -> np.ndarray:
        if h.ndim == 5:
            check_p4_features(h.shape, "p4_action")
            rotated = np.rot90(h, g % ORIENTATIONS, axes=(-2, -1))
            return np.ascontiguousarray(np.roll(rotated, g % ORIENTATIONS, axis=ORIENTATION_AXIS))
        return self.act_input(g, h)

    def permutation_matrix(self, g: int, height: int, width: int) -> np.ndarray:
        """Matrix of T_g on vectorised (height, width) images."""
        eye = np.eye(height * width).reshape(height * width, height, width)
        return self.act_input(g, eye).reshape(height * width, -1).T


class ScaleGroup(GroupAction):
    """Discrete set of resize factors; only approximately a group on pixel grids."""

    group_id = "ScaleSet"
    inverse_jacobian_kind = "non-isometric"

    def __init__(self, factors: Sequence[float], mode: str = "bilinear"):
        if not factors or any(a <= 0 for a in factors):
            raise ValueError(f"scale factors must be positive, got {list(factors)}")
        self._factors = [float(a) for a in factors]
        self.mode = mode

    @property
    def elements(self) -> list[float]:
        return list(self._factors)

    @property
    def identity(self) -> float:
        return 1.0

    def compose(self, a: float, b: float) -> float:
        return a * b

    def inverse(self, a: float) -> float:
        return 1.0 / a

    def act_input(self, g: float, x: np.ndarray) -> np.ndarray:
        h, w = x.shape[-2:]
        return resize_array(x, (max(1, round(g * h)), max(1, round(g * w))), self.mode)

    def align(self, g: float, field: np.ndarray) -> np.ndarray:
        raise NotImplementedError("scale actions change the grid size; no frame alignment is defined")


def resize_array(x: np.ndarray, size: tuple[int, int], mode: str = "bilinear") -> np.ndarray:
    """Plain-array version of `tensor.resize` (same interpolation weights)."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return np.array(x, copy=True)
    mh = interpolation_matrix(h, size[0], mode, x.dtype)
    mw = interpolation_matrix(w, size[1], mode, x.dtype)
    return np.einsum("oh,...hw,pw->...op", mh, x, mw, optimize=True)


def verify_group_axioms(group: GroupAction) -> bool:
    """Exhaustive closure, identity and inverse check on the element list."""
    elements = group.elements
    members = set(elements)
    e = group.identity
    for a in elements:
        if group.compose(e, a) != a or group.compose(a, e) != a:
            return False
        if group.compose(a, group.inverse(a)) != e:
            return False
        for b in elements:
            if group.compose(a, b) not in members:
                return False
    return True


def get_group(group_id: str, factors: Sequence[float] | None = None) -> GroupAction:
    if group_id == "P4":
        return P4Group()
    if group_id == "ScaleSet":
        return ScaleGroup(factors or [1.0])
    if group_id == "trivial":
        return TrivialGroup()
    raise ValueError(f"unknown group {group_id!r}")
