"""
Datasets: CIFAR binary ingestion/export, synthetic orientation and scale
generators, class-balanced subsampling, and the corruption pipeline.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .groups import resize_array
from .schemas import CorruptionKind, CorruptionSpec

logger = logging.getLogger(__name__)

CIFAR_IMAGE_SHAPE = (3, 32, 32)
CIFAR_PIXELS = 3 * 32 * 32

CORRUPTION_TABLE_VERSION = "equirobust.corruptions/1"

# severity 1..5 -> parameter
SEVERITY_TABLE: dict[str, tuple[float, ...]] = {
    CorruptionKind.GAUSSIAN_NOISE.value: (0.04, 0.06, 0.08, 0.09, 0.10),   # σ
    CorruptionKind.SHOT_NOISE.value: (500.0, 250.0, 100.0, 75.0, 50.0),    # λ
    CorruptionKind.IMPULSE_NOISE.value: (0.01, 0.02, 0.03, 0.05, 0.07),    # rate p
    CorruptionKind.BRIGHTNESS.value: (0.05, 0.1, 0.15, 0.2, 0.3),          # offset b
    CorruptionKind.CONTRAST.value: (0.75, 0.5, 0.4, 0.3, 0.15),            # factor c
    CorruptionKind.SATURATE.value: (1.0, 2.0, 3.0, 4.0, 6.0),              # S-curve strength s
    CorruptionKind.PIXELATE.value: (1.25, 1.5, 2.0, 2.5, 3.0),             # factor d
    CorruptionKind.DEFOCUS_BLUR.value: (1.0, 1.5, 2.0, 2.5, 3.0),          # disk radius
}


class DatasetError(ValueError):
    """Malformed dataset file or invalid dataset contents."""


class CorruptionError(ValueError):
    """Unknown corruption kind or severity."""


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) == 0:
            raise DatasetError(f"dataset needs a non-empty (N, C, H, W) image array, got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise DatasetError(f"{len(self.images)} images but labels of shape {self.labels.shape}")
        if self.images.min() < 0.0 or self.images.max() > 1.0:
            raise DatasetError("pixels must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.images)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def take(self, indices: Sequence[int], split: str | None = None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], self.num_classes, split or self.split,
                       {**self.provenance, "subset_of": self.digest(), "subset_size": int(len(indices))})

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


# --- CIFAR binary --------------------------------------------------------

def load_cifar_binary(paths: Sequence[str | Path] | str | Path, num_classes: int = 10, label_bytes: int = 1,
                      split: str = "train") -> Dataset:
    """Read CIFAR records: `label_bytes` label bytes then 3×32×32 planar RGB bytes.

    CIFAR-100 files carry (coarse, fine) labels; with label_bytes=2 the fine
    label is used.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    record = label_bytes + CIFAR_PIXELS
    chunks, digest = [], hashlib.sha256()
    for path in paths:
        raw = Path(path).read_bytes()
        if len(raw) == 0:
            raise DatasetError(f"{path}: empty file")
        if len(raw) % record:
            raise DatasetError(f"{path}: size {len(raw)} is not a multiple of the {record}-byte record")
        digest.update(raw)
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, record))
    if not chunks:
        raise DatasetError("no CIFAR files given")
    records = np.concatenate(chunks, axis=0)
    labels = records[:, label_bytes - 1].astype(np.int64)
    if labels.max() >= num_classes:
        raise DatasetError(f"label byte {int(labels.max())} outside [0, {num_classes})")
    images = records[:, label_bytes:].reshape((-1,) + CIFAR_IMAGE_SHAPE).astype(np.float64) / 255.0
    provenance = {"source": "cifar_binary", "files": [str(p) for p in paths], "sha256": digest.hexdigest(),
                  "label_bytes": label_bytes}
    return Dataset(images, labels, num_classes, split, provenance)


def export_cifar_binary(dataset: Dataset, path: str | Path, label_bytes: int = 1) -> Path:
    """Write a dataset in the CIFAR record layout (pixels rounded to bytes)."""
    if dataset.images.shape[1:] != CIFAR_IMAGE_SHAPE:
        raise DatasetError(f"CIFAR layout needs {CIFAR_IMAGE_SHAPE} images, got {dataset.images.shape[1:]}")
    if dataset.num_classes > 256:
        raise DatasetError("labels do not fit in one byte")
    n = len(dataset)
    records = np.zeros((n, label_bytes + CIFAR_PIXELS), dtype=np.uint8)
    records[:, label_bytes - 1] = dataset.labels
    records[:, label_bytes:] = np.rint(dataset.images.reshape(n, -1) * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(records.tobytes())
    return path


CIFAR_LAYOUTS = {
    "cifar10": {"train": ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin",
                          "data_batch_5.bin"],
                "test": ["test_batch.bin"], "label_bytes": 1, "num_classes": 10},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"], "label_bytes": 2, "num_classes": 100},
}


def find_cifar_files(root: str | Path, source: str, split: str) -> list[Path]:
    """Locate the standard binary batch files anywhere below `root`."""
    layout = CIFAR_LAYOUTS[source]
    found = []
    for name in layout["train" if split == "train" else "test"]:
        matches = sorted(Path(root).rglob(name))
        if not matches:
            raise DatasetError(f"{source}: {name} not found under {root}")
        found.append(matches[0])
    return found


def load_cifar_dir(root: str | Path, source: str = "cifar10", split: str = "train") -> Dataset:
    layout = CIFAR_LAYOUTS[source]
    return load_cifar_binary(find_cifar_files(root, source, split), layout["num_classes"], layout["label_bytes"],
                             split)


# --- synthetic generators ------------------------------------------------

def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-centre coordinates relative to the image centre, y pointing up."""
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    return cols - c, c - rows


def bar_image(angle_deg: float, size: int = 32, length: float = 0.38, width: float = 1.2,
              tip: float = 1.6) -> np.ndarray:
    """Directed bar from the centre towards `angle_deg` (counter-clockwise) with a bright tip.

    Rendering is a smooth function of the distance to the segment, so
    np.rot90 of the image equals the bar drawn at angle + 90°.
    """
    x, y = _grid(size)
    theta = math.radians(angle_deg)
    ux, uy = math.cos(theta), math.sin(theta)
    reach = length * size
    t = np.clip(x * ux + y * uy, 0.0, reach)
    d2 = (x - t * ux) ** 2 + (y - t * uy) ** 2
    bar = np.exp(-d2 / (2.0 * width ** 2))
    tip_d2 = (x - reach * ux) ** 2 + (y - reach * uy) ** 2
    blob = np.exp(-tip_d2 / (2.0 * tip ** 2))
    return np.clip(0.7 * bar + blob, 0.0, 1.0)


def angle_class(angle_deg: float, num_classes: int) -> int:
    sector = 360.0 / num_classes
    return int(round((angle_deg % 360.0) / sector)) % num_classes


def blob_image(sigma: float, size: int = 32, centre: tuple[float, float] = (0.0, 0.0)) -> np.ndarray:
    x, y = _grid(size)
    return np.exp(-((x - centre[0]) ** 2 + (y - centre[1]) ** 2) / (2.0 * sigma ** 2))


def _balanced_labels(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % k)


def make_synthetic(kind: str, n: int, image_size: int = 32, num_classes: int = 4, seed: int = 0,
                   channels: int = 3, split: str = "train") -> Dataset:
    """Reproducible dataset whose classes are defined by orientation or scale."""
    if n <= 0:
        raise DatasetError(f"synthetic dataset needs n > 0, got {n}")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, num_classes, rng)
    images = np.zeros((n, channels, image_size, image_size))
    if kind == "oriented_bars":
        if num_classes > 36:
            raise DatasetError("oriented_bars supports at most 36 orientation classes")
        sector = 360.0 / num_classes
        for i, c in enumerate(labels):
            angle = c * sector + rng.uniform(-0.3, 0.3) * sector
            plane = bar_image(angle, image_size, length=rng.uniform(0.3, 0.42), width=rng.uniform(0.9, 1.5))
            images[i] = plane[None] * rng.uniform(0.6, 1.0, size=(channels, 1, 1))
    elif kind == "scaled_blobs":
        if num_classes > 8:
            raise DatasetError("scaled_blobs supports at most 8 size classes")
        lo, hi = 1.0, image_size / 5.0
        for i, c in enumerate(labels):
            sigma = lo * (hi / lo) ** ((c + rng.uniform(0.15, 0.85)) / num_classes)
            centre = tuple(rng.uniform(-image_size / 8, image_size / 8, size=2))
            plane = blob_image(sigma, image_size, centre)
            images[i] = plane[None] * rng.uniform(0.6, 1.0, size=(channels, 1, 1))
    else:
        raise DatasetError(f"unknown synthetic kind {kind!r}")
    images = np.clip(images + rng.normal(0.0, 0.02, size=images.shape), 0.0, 1.0)
    provenance = {"source": "synthetic", "kind": kind, "seed": seed, "n": n}
    return Dataset(images, labels, num_classes, split, provenance)


def subsample(dataset: Dataset, n_per_class: int, seed: int = 0) -> Dataset:
    """Class-balanced subset of `n_per_class` images per class, in original order."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if len(members) == 0:
            continue
        if n_per_class > len(members):
            raise DatasetError(f"class {c} has {len(members)} images, {n_per_class} requested")
        keep.append(rng.choice(members, size=n_per_class, replace=False))
    if not keep:
        raise DatasetError("subsample of a dataset without labelled images")
    return dataset.take(np.sort(np.concatenate(keep)))


# --- corruptions ---------------------------------------------------------

def corruption_parameter(kind: str, severity: int) -> float:
    if kind not in SEVERITY_TABLE:
        raise CorruptionError(f"unknown corruption kind {kind!r}")
    if not 1 <= int(severity) <= 5:
        raise CorruptionError(f"severity must lie in 1..5, got {severity}")
    return SEVERITY_TABLE[kind][int(severity) - 1]


def disk_kernel(radius: float, alias_blur: float = 0.1) -> np.ndarray:
    """Normalised disk, lightly blurred against aliasing."""
    half = int(math.ceil(radius))
    span = np.arange(-half, half + 1)
    xx, yy = np.meshgrid(span, span)
    kernel = ((xx ** 2 + yy ** 2) <= radius ** 2).astype(np.float64)
    kernel /= kernel.sum()
    if alias_blur > 0:
        kernel = ndimage.gaussian_filter(kernel, alias_blur)
    return kernel / kernel.sum()


def _gaussian_noise(x, sigma, rng):
    return x + rng.normal(0.0, sigma, size=x.shape) if sigma > 0 else x.copy()


def _shot_noise(x, lam, rng):
    return rng.poisson(x * lam) / lam


def _impulse_noise(x, p, rng):
    out = x.copy()
    hit = rng.random(x.shape) < p
    salt = rng.random(x.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = 0.0
    return out


def _brightness(x, b, rng):
    return x + b


def _contrast(x, c, rng):
    mean = x.mean(axis=(-2, -1), keepdims=True)
    return (x - mean) * c + mean


def _saturate(x, s, rng):
    return 0.5 + np.tanh(s * (x - 0.5)) / (2.0 * np.tanh(s / 2.0))


def pixelate_image(x: np.ndarray, d: float) -> np.ndarray:
    h, w = x.shape[-2:]
    small = (max(1, round(h / d)), max(1, round(w / d)))
    return resize_array(resize_array(x, small, "nearest"), (h, w), "nearest")


def _pixelate(x, d, rng):
    return pixelate_image(x, d)


def _defocus_blur(x, radius, rng):
    kernel = disk_kernel(radius)
    return np.stack([ndimage.convolve(plane, kernel, mode="reflect") for plane in x])


CORRUPTIONS: dict[str, Callable[[np.ndarray, float, np.random.Generator], np.ndarray]] = {
    CorruptionKind.GAUSSIAN_NOISE.value: _gaussian_noise,
    CorruptionKind.SHOT_NOISE.value: _shot_noise,
    CorruptionKind.IMPULSE_NOISE.value: _impulse_noise,
    CorruptionKind.BRIGHTNESS.value: _brightness,
    CorruptionKind.CONTRAST.value: _contrast,
    CorruptionKind.SATURATE.value: _saturate,
    CorruptionKind.PIXELATE.value: _pixelate,
    CorruptionKind.DEFOCUS_BLUR.value: _defocus_blur,
}


def apply_corruption(image: np.ndarray, kind: str, parameter: float, rng: np.random.Generator) -> np.ndarray:
    """One image (C, H, W) under an explicit parameter value, clipped to [0, 1]."""
    if kind not in CORRUPTIONS:
        raise CorruptionError(f"unknown corruption kind {kind!r}")
    return np.clip(CORRUPTIONS[kind](np.asarray(image, dtype=np.float64), parameter, rng), 0.0, 1.0)


def corrupt(dataset: Dataset, spec: CorruptionSpec, threads: int = 1) -> Dataset:
    """Apply a corruption at a severity; image i draws from default_rng((seed, i))."""
    kind = str(spec.kind)
    parameter = corruption_parameter(kind, spec.severity)

    def one(i: int) -> np.ndarray:
        return apply_corruption(dataset.images[i], kind, parameter, np.random.default_rng((spec.seed, i)))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            images = list(pool.map(one, range(len(dataset))))
    else:
        images = [one(i) for i in range(len(dataset))]
    provenance = {**dataset.provenance, "corruption": kind, "severity": spec.severity, "parameter": parameter,
                  "corruption_seed": spec.seed, "corruption_table": CORRUPTION_TABLE_VERSION,
                  "parent_digest": dataset.digest()}
    return Dataset(np.stack(images), dataset.labels.copy(), dataset.num_classes, dataset.split, provenance)
