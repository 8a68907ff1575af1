"""
Dataset container, CIFAR binary layout, synthetic generators and corruptions.
"""

import numpy as np
import pytest

from equirobust.data import (CIFAR_IMAGE_SHAPE, SEVERITY_TABLE, CorruptionError, Dataset, DatasetError,
                             angle_class, apply_corruption, bar_image, corrupt, corruption_parameter,
                             disk_kernel, export_cifar_binary, load_cifar_binary, load_cifar_dir, make_synthetic,
                             pixelate_image, subsample)
from equirobust.schemas import CorruptionSpec


def _cifar_like(n, num_classes, seed=0):
    r = np.random.default_rng(seed)
    images = r.integers(0, 256, size=(n,) + CIFAR_IMAGE_SHAPE) / 255.0
    return Dataset(images, np.arange(n) % num_classes, num_classes)


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((0, 1, 4, 4)), np.zeros(0), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 4, 4)), np.zeros(3), 2)
    with pytest.raises(DatasetError):
        Dataset(np.full((2, 1, 4, 4), 1.5), np.zeros(2), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 4, 4)), np.array([0, 2]), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((1, 4, 4)), np.zeros(1), 2)


def test_take_keeps_provenance(tiny_bars):
    part = tiny_bars.take([0, 3, 5], split="eval")
    assert len(part) == 3
    assert part.split == "eval"
    assert part.provenance["subset_of"] == tiny_bars.digest()
    np.testing.assert_array_equal(part.labels, tiny_bars.labels[[0, 3, 5]])


def test_cifar10_binary_round_trip(tmp_path):
    data = _cifar_like(7, 10)
    path = export_cifar_binary(data, tmp_path / "data_batch_1.bin")
    assert path.stat().st_size == 7 * (1 + 3072)
    loaded = load_cifar_binary(path)
    np.testing.assert_allclose(loaded.images, data.images, atol=1e-12)
    np.testing.assert_array_equal(loaded.labels, data.labels)
    assert loaded.provenance["label_bytes"] == 1


def test_cifar100_uses_the_fine_label(tmp_path):
    data = _cifar_like(5, 100)
    data.labels = np.array([3, 42, 99, 0, 57])
    export_cifar_binary(data, tmp_path / "cifar-100-binary" / "test.bin", label_bytes=2)
    loaded = load_cifar_dir(tmp_path, "cifar100", "test")
    assert loaded.num_classes == 100
    np.testing.assert_array_equal(loaded.labels, [3, 42, 99, 0, 57])


def test_malformed_cifar_files_are_rejected(tmp_path):
    empty = tmp_path / "empty.bin"
    empty.write_bytes(b"")
    with pytest.raises(DatasetError):
        load_cifar_binary(empty)
    short = tmp_path / "short.bin"
    short.write_bytes(bytes(3000))
    with pytest.raises(DatasetError):
        load_cifar_binary(short)
    bad_label = tmp_path / "label.bin"
    bad_label.write_bytes(bytes([12]) + bytes(3072))
    with pytest.raises(DatasetError):
        load_cifar_binary(bad_label)
    with pytest.raises(DatasetError):
        load_cifar_dir(tmp_path, "cifar10", "train")


def test_bar_rotation_matches_angle_shift():
    for angle in (0.0, 30.0, 135.0):
        np.testing.assert_allclose(np.rot90(bar_image(angle, 16)), bar_image(angle + 90.0, 16), atol=1e-12)
    assert angle_class(90.0, 4) == 1
    assert angle_class(359.0, 4) == 0


def test_synthetic_sets_are_reproducible_and_balanced():
    a = make_synthetic("scaled_blobs", 24, image_size=16, num_classes=4, seed=5, channels=3)
    b = make_synthetic("scaled_blobs", 24, image_size=16, num_classes=4, seed=5, channels=3)
    assert a.digest() == b.digest()
    assert a.images.shape == (24, 3, 16, 16)
    np.testing.assert_array_equal(a.class_counts(), [6, 6, 6, 6])
    assert make_synthetic("scaled_blobs", 24, image_size=16, seed=6).digest() != a.digest()
    with pytest.raises(DatasetError):
        make_synthetic("stripes", 4)
    with pytest.raises(DatasetError):
        make_synthetic("oriented_bars", 0)


def test_subsample_is_class_balanced(tiny_bars):
    part = subsample(tiny_bars, 3, seed=1)
    np.testing.assert_array_equal(part.class_counts(), [3, 3, 3, 3])
    assert subsample(tiny_bars, 3, seed=1).digest() == part.digest()
    with pytest.raises(DatasetError):
        subsample(tiny_bars, 100)


def test_severity_table_lookup():
    assert corruption_parameter("gaussian_noise", 1) == 0.04
    assert corruption_parameter("contrast", 5) == 0.15
    assert corruption_parameter("pixelate", 3) == 2.0
    assert all(len(values) == 5 for values in SEVERITY_TABLE.values())
    with pytest.raises(CorruptionError):
        corruption_parameter("fog", 1)
    with pytest.raises(CorruptionError):
        corruption_parameter("brightness", 6)


def test_every_corruption_is_deterministic_and_clipped(tiny_bars):
    for kind in SEVERITY_TABLE:
        spec = CorruptionSpec(kind=kind, severity=5, seed=9)
        a, b = corrupt(tiny_bars, spec), corrupt(tiny_bars, spec, threads=3)
        np.testing.assert_array_equal(a.images, b.images)
        assert a.images.min() >= 0.0 and a.images.max() <= 1.0
        np.testing.assert_array_equal(a.labels, tiny_bars.labels)
        assert a.provenance["corruption"] == kind
        assert a.provenance["parent_digest"] == tiny_bars.digest()


def test_noise_depends_on_the_seed(tiny_bars):
    a = corrupt(tiny_bars, CorruptionSpec(kind="gaussian_noise", severity=2, seed=0))
    b = corrupt(tiny_bars, CorruptionSpec(kind="gaussian_noise", severity=2, seed=1))
    assert not np.array_equal(a.images, b.images)


def test_pixelated_checkerboard_collapses_to_one_phase():
    rows, cols = np.mgrid[0:32, 0:32]
    board = ((rows + cols) % 2).astype(np.float64)[None]
    np.testing.assert_array_equal(pixelate_image(board, 2.0), np.zeros_like(board))


def test_brightness_and_contrast_oracles():
    x = np.full((1, 4, 4), 0.5)
    x[0, 0, 0] = 0.9
    rng = np.random.default_rng(0)
    np.testing.assert_allclose(apply_corruption(x, "brightness", 0.2, rng), np.clip(x + 0.2, 0.0, 1.0))
    mean = x.mean()
    np.testing.assert_allclose(apply_corruption(x, "contrast", 0.5, rng), (x - mean) * 0.5 + mean)
    with pytest.raises(CorruptionError):
        apply_corruption(x, "snow", 1.0, rng)


def test_disk_kernel_is_normalised():
    for radius in (1.0, 2.5, 3.0):
        kernel = disk_kernel(radius)
        assert abs(kernel.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(kernel, kernel.T)
