"""
White-box ℓ∞ attacks (FGSM, PGD) and adversarial-accuracy sweeps.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Iterator, Sequence

import numpy as np

from .schemas import AttackConfig, AttackKind
from .tensor import Tensor, backward, cross_entropy, get_default_dtype, no_grad

logger = logging.getLogger(__name__)


class AttackError(RuntimeError):
    """Attack inputs are invalid or the loss gradient is not finite."""


@contextmanager
def evaluation_mode(model) -> Iterator[None]:
    """Run with batch-norm in eval mode, restoring the previous mode afterwards."""
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        yield
    finally:
        if was_training:
            model.train()


def _check_inputs(x: np.ndarray, y: np.ndarray, epsilon: float) -> None:
    if x.shape[0] == 0:
        raise AttackError("attack on an empty batch")
    if y.shape != (x.shape[0],):
        raise AttackError(f"labels shape {y.shape} does not match batch of {x.shape[0]}")
    if not 0.0 <= epsilon <= 1.0:
        raise AttackError(f"epsilon must lie in [0, 1], got {epsilon}")
    if x.min() < 0.0 or x.max() > 1.0:
        raise AttackError("inputs must lie in [0, 1]")


def loss_gradient(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """∇_x of the summed cross-entropy; row i is the gradient of sample i's own loss."""
    leaf = Tensor(np.array(x, dtype=get_default_dtype()), requires_grad=True)
    loss = cross_entropy(model(leaf), y, reduction="sum")
    backward(loss)
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    if not np.all(np.isfinite(grad)):
        raise AttackError("non-finite input gradient")
    return grad


def per_sample_loss(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with no_grad(), evaluation_mode(model):
        return cross_entropy(model(Tensor(x)), y, reduction="none").data.copy()


def fgsm(model, x: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    """clip(x + ε·sign(∇_x CE), 0, 1), with sign(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    _check_inputs(x, y, epsilon)
    if epsilon == 0.0:
        return x.copy()
    with evaluation_mode(model):
        grad = loss_gradient(model, x, y)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


def random_start(x: np.ndarray, epsilon: float, seed: int, sample_offset: int = 0) -> np.ndarray:
    """Uniform start in the ε-ball, one generator per sample (seed + sample index)."""
    start = np.empty_like(x)
    for i in range(x.shape[0]):
        rng = np.random.default_rng(seed + sample_offset + i)
        start[i] = x[i] + rng.uniform(-epsilon, epsilon, size=x.shape[1:])
    return np.clip(start, 0.0, 1.0)


def pgd(model, x: np.ndarray, y: np.ndarray, config: AttackConfig, sample_offset: int = 0,
        trace: list | None = None) -> np.ndarray:
    """Projected sign-gradient ascent inside B∞(x, ε) ∩ [0, 1]^d.

    `trace`, when given, receives a copy of every iterate.
    """
    x0 = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    eps, alpha = config.epsilon, config.alpha
    _check_inputs(x0, y, eps)
    if eps == 0.0:
        return x0.copy()
    lower, upper = x0 - eps, x0 + eps
    x_adv = random_start(x0, eps, config.seed, sample_offset) if config.random_start else x0.copy()
    with evaluation_mode(model):
        for _ in range(config.steps):
            grad = loss_gradient(model, x_adv, y)
            x_adv = x_adv + alpha * np.sign(grad)
            x_adv = np.clip(np.clip(x_adv, lower, upper), 0.0, 1.0)
            if trace is not None:
                trace.append(x_adv.copy())
    return x_adv


def attack(model, x: np.ndarray, y: np.ndarray, config: AttackConfig, sample_offset: int = 0) -> np.ndarray:
    if config.kind == AttackKind.FGSM.value:
        return fgsm(model, x, y, config.epsilon)
    return pgd(model, x, y, config, sample_offset=sample_offset)


def attack_dataset(model, images: np.ndarray, labels: np.ndarray, config: AttackConfig,
                   batch_size: int = 128, threads: int = 1) -> np.ndarray:
    """Attack every sample; batches may run on worker threads with their own tapes."""
    starts = list(range(0, len(images), batch_size))

    def run(start: int) -> np.ndarray:
        stop = start + batch_size
        return attack(model, images[start:stop], labels[start:stop], config, sample_offset=start)

    with evaluation_mode(model):
        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, starts))
        else:
            parts = [run(s) for s in starts]
    return np.concatenate(parts, axis=0)


def accuracy_of(model, images: np.ndarray, labels: np.ndarray) -> float:
    with evaluation_mode(model):
        logits = model.predict(images)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def adversarial_accuracy(model, images: np.ndarray, labels: np.ndarray, config: AttackConfig,
                         epsilons: Sequence[float], batch_size: int = 128, threads: int = 1) -> dict[float, float]:
    """Accuracy after attacking at each ε; the ε = 0 entry is clean accuracy."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise AttackError("adversarial_accuracy on an empty dataset")
    epsilons = [float(e) for e in epsilons]
    if not epsilons:
        raise AttackError("epsilon grid is empty")
    if any(b <= a for a, b in zip(epsilons, epsilons[1:])):
        raise AttackError(f"epsilon grid must be ascending, got {epsilons}")

    results: dict[float, float] = {0.0: accuracy_of(model, images, labels)}
    for eps in epsilons:
        if eps == 0.0:
            continue
        x_adv = attack_dataset(model, images, labels, config.with_epsilon(eps), batch_size, threads)
        results[eps] = accuracy_of(model, x_adv, labels)
        logger.info("%s eps=%.3f accuracy=%.4f", config.kind, eps, results[eps])
    return results
