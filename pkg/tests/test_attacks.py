"""
FGSM / PGD contracts: ball and box constraints, the single-step identity,
PGD dominance over FGSM, and the accuracy sweep.
"""

import numpy as np
import pytest

from conftest import linear_model, tiny_spec
from equirobust import models
from equirobust.attacks import (AttackError, adversarial_accuracy, attack_dataset, fgsm, per_sample_loss, pgd,
                                random_start)
from equirobust.schemas import AttackConfig


def test_outputs_stay_in_ball_and_box(rng):
    model = models.build(tiny_spec("parallel_rot_scale"))
    x = rng.uniform(size=(6, 1, 8, 8))
    y = rng.integers(0, 4, size=6)
    for eps in (0.01, 0.05, 0.3):
        for x_adv in (fgsm(model, x, y, eps), pgd(model, x, y, AttackConfig(epsilon=eps, steps=5, seed=1))):
            assert np.max(np.abs(x_adv - x)) <= eps + 1e-12
            assert x_adv.min() >= 0.0 and x_adv.max() <= 1.0


def test_single_step_pgd_is_fgsm(rng):
    model = models.build(tiny_spec("baseline"))
    x = rng.uniform(size=(5, 1, 8, 8))
    y = rng.integers(0, 4, size=5)
    for eps in (0.01, 0.03, 0.1):
        config = AttackConfig(kind="pgd", epsilon=eps, steps=1, step_size=eps, random_start=False)
        np.testing.assert_array_equal(pgd(model, x, y, config), fgsm(model, x, y, eps))


def test_pgd_loss_dominates_fgsm_on_binary_linear_models():
    for seed in range(5):
        model = linear_model(seed, num_classes=2, image_size=4)
        r = np.random.default_rng(seed)
        x = r.uniform(0.2, 0.8, size=(100, 1, 4, 4))
        y = r.integers(0, 2, size=100)
        eps = 0.05
        config = AttackConfig(kind="pgd", epsilon=eps, steps=10, step_size=eps / 4, random_start=False)
        fgsm_loss = per_sample_loss(model, fgsm(model, x, y, eps), y)
        pgd_loss = per_sample_loss(model, pgd(model, x, y, config), y)
        assert np.all(pgd_loss >= fgsm_loss - 1e-9)


def test_pgd_accuracy_never_above_fgsm_on_binary_linear_models():
    for seed in range(5):
        model = linear_model(seed, num_classes=2, image_size=4)
        x = np.random.default_rng(seed).uniform(0.2, 0.8, size=(100, 1, 4, 4))
        y = np.argmax(model.predict(x), axis=1)
        epsilons = [0.02, 0.05, 0.1]
        fgsm_acc = adversarial_accuracy(model, x, y, AttackConfig(kind="fgsm"), epsilons)
        for start in (False, True):
            for eps in epsilons:
                config = AttackConfig(kind="pgd", epsilon=eps, steps=10, step_size=eps / 4, random_start=start,
                                      seed=seed)
                assert adversarial_accuracy(model, x, y, config, [eps])[eps] <= fgsm_acc[eps]


def test_every_pgd_iterate_is_projected(rng):
    model = models.build(tiny_spec("baseline"))
    x = rng.uniform(size=(4, 1, 8, 8))
    y = rng.integers(0, 4, size=4)
    eps = 0.05
    trace = []
    final = pgd(model, x, y, AttackConfig(epsilon=eps, steps=6, step_size=0.03, seed=3), trace=trace)
    assert len(trace) == 6
    np.testing.assert_array_equal(trace[-1], final)
    for iterate in trace:
        assert np.max(np.abs(iterate - x)) <= eps + 1e-12
        assert iterate.min() >= 0.0 and iterate.max() <= 1.0


def test_zero_epsilon_returns_input(rng):
    model = models.build(tiny_spec("baseline"))
    x = rng.uniform(size=(2, 1, 8, 8))
    y = np.array([0, 1])
    np.testing.assert_array_equal(fgsm(model, x, y, 0.0), x)
    np.testing.assert_array_equal(pgd(model, x, y, AttackConfig(epsilon=0.0)), x)


def test_invalid_inputs_raise(rng):
    model = models.build(tiny_spec("baseline"))
    x = rng.uniform(size=(2, 1, 8, 8))
    with pytest.raises(AttackError):
        fgsm(model, x, np.array([0]), 0.1)
    with pytest.raises(AttackError):
        fgsm(model, x + 2.0, np.array([0, 1]), 0.1)
    with pytest.raises(AttackError):
        fgsm(model, x[:0], np.zeros(0, dtype=int), 0.1)


def test_random_start_is_seeded_per_sample(rng):
    x = rng.uniform(size=(4, 1, 4, 4))
    full = random_start(x, 0.1, seed=7)
    tail = random_start(x[2:], 0.1, seed=7, sample_offset=2)
    np.testing.assert_array_equal(full[2:], tail)
    assert np.max(np.abs(full - x)) <= 0.1


def test_threaded_sweep_matches_serial(rng):
    model = models.build(tiny_spec("baseline"))
    x = rng.uniform(size=(12, 1, 8, 8))
    y = rng.integers(0, 4, size=12)
    config = AttackConfig(epsilon=0.05, steps=3, seed=2)
    serial = attack_dataset(model, x, y, config, batch_size=4, threads=1)
    threaded = attack_dataset(model, x, y, config, batch_size=4, threads=3)
    np.testing.assert_array_equal(serial, threaded)


def test_accuracy_sweep_includes_clean_and_is_monotone_for_linear_fgsm():
    model = linear_model(11, num_classes=3, image_size=4)
    r = np.random.default_rng(11)
    x = r.uniform(0.3, 0.7, size=(60, 1, 4, 4))
    y = np.argmax(model.predict(x), axis=1)
    acc = adversarial_accuracy(model, x, y, AttackConfig(kind="fgsm"), [0.0, 0.01, 0.05, 0.2])
    assert acc[0.0] == 1.0
    values = [acc[e] for e in (0.0, 0.01, 0.05, 0.2)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_epsilon_grid_must_ascend(rng):
    model = models.build(tiny_spec("baseline"))
    x = rng.uniform(size=(2, 1, 8, 8))
    with pytest.raises(AttackError):
        adversarial_accuracy(model, x, np.array([0, 1]), AttackConfig(), [0.03, 0.01])


def test_fgsm_config_is_single_step():
    config = AttackConfig(kind="fgsm", epsilon=0.03, steps=20, random_start=True)
    assert config.steps == 1
    assert not config.random_start
    assert config.alpha == 0.03
    assert AttackConfig(kind="pgd", epsilon=0.08).alpha == pytest.approx(0.01)
