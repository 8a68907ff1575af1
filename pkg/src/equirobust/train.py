"""
Training: SGD-momentum / Adam on softmax cross-entropy, optional PGD
adversarial training, evaluation, and the (spec, seed) experiment matrix.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import psutil

from . import models
from .attacks import adversarial_accuracy, evaluation_mode, pgd
from .certify import clever_score
from .data import Dataset, DatasetError, corrupt
from .layers import Module, Parameter
from .models import Model
from .report import ReportWriter, append_record, run_metadata, summarize
from .schemas import CorruptionSpec, ModelSpec, NamedModelSpec, OptimizerKind, ReportRow, RunConfig, TrainConfig
from .tensor import NonFiniteError, Tensor, backward, cross_entropy, default_dtype, no_grad

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""

    def __init__(self, message: str, last_checkpoint: Optional[Path] = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


class MatrixAbortedError(RuntimeError):
    """A matrix cell failed; the rows gathered so far were persisted."""

    def __init__(self, message: str, partial_report: Path):
        super().__init__(message)
        self.partial_report = partial_report


def worker_count(requested: Optional[int] = None) -> int:
    """Thread count capped at the number of physical cores."""
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    if requested is None:
        return cores
    return max(1, min(int(requested), cores))


# --- optimizers ----------------------------------------------------------

class Optimizer:
    """Updates parameters in place from their `.grad`; weight decay skips biases and BN affine terms."""

    def __init__(self, params: Sequence[Parameter], weight_decay: float = 0.0):
        self.params = list(params)
        self.weight_decay = weight_decay

    def _grad(self, p: Parameter) -> np.ndarray:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if self.weight_decay and p.data.ndim > 1:
            g = g + self.weight_decay * p.data
        return g

    def step(self, lr: float) -> None:
        raise NotImplementedError


class SGDMomentum(Optimizer):
    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, weight_decay)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += self._grad(p)
            p.data = p.data - lr * v


class Adam(Optimizer):
    def __init__(self, params, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(params, weight_decay)
        self.betas, self.eps, self.t = betas, eps, 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            g = self._grad(p)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(model: Module, config: TrainConfig) -> Optimizer:
    if config.optimizer == OptimizerKind.ADAM.value:
        return Adam(model.parameters(), weight_decay=config.weight_decay)
    return SGDMomentum(model.parameters(), momentum=config.momentum, weight_decay=config.weight_decay)


def learning_rate(config: TrainConfig, step: int, total_steps: int) -> float:
    if config.schedule == "constant" or total_steps <= 1:
        return config.learning_rate
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * step / total_steps))


# --- training ------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    seed: int
    initial_loss: float
    final_loss: float
    final_accuracy: float
    log: list[dict] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    checkpoint_digest: Optional[str] = None


def _name_of(spec: ModelSpec) -> str:
    return spec.name if isinstance(spec, NamedModelSpec) else str(spec.architecture_id)


def _check_dataset(spec: ModelSpec, dataset: Dataset) -> None:
    if dataset.num_classes != spec.num_classes:
        raise DatasetError(f"dataset has {dataset.num_classes} classes, model spec expects {spec.num_classes}")
    if dataset.images.shape[1] != spec.in_channels:
        raise DatasetError(f"dataset has {dataset.images.shape[1]} channels, model spec expects {spec.in_channels}")


def evaluate(model: Model, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) in eval mode."""
    if len(dataset) == 0:
        raise DatasetError("evaluate on an empty dataset")
    correct, total_loss = 0, 0.0
    with no_grad(), evaluation_mode(model):
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size]
            y = dataset.labels[start:start + batch_size]
            logits = model(Tensor(x))
            total_loss += float(cross_entropy(logits, y, reduction="sum").item())
            correct += int(np.sum(np.argmax(logits.data, axis=1) == y))
    return correct / len(dataset), total_loss / len(dataset)


def train(spec: ModelSpec, dataset: Dataset, config: TrainConfig, seed: Optional[int] = None,
          out_dir: str | Path | None = None, log_path: str | Path | None = None) -> TrainResult:
    """Fit one model; the seed drives both the weight init and the batch order.

    With `out_dir` set, the final checkpoint (and any cadence checkpoints) are
    written there as `<name>_seed<seed>*.eqrb`.
    """
    _check_dataset(spec, dataset)
    seed = config.seeds[0] if seed is None else int(seed)
    spec = spec.model_copy(update={"seed": seed})
    name = _name_of(spec)
    stem = f"{name}_seed{seed}"
    out_dir = Path(out_dir) if out_dir is not None else None

    model = models.build(spec)
    initial_acc, initial_loss = evaluate(model, dataset)
    logger.info("training %s seed=%d on %d images (initial loss %.4f)", name, seed, len(dataset), initial_loss)

    float32 = config.precision == "float32"
    dtype = np.float32 if float32 else np.float64
    if float32:
        model.cast(np.float32)
    optimizer = make_optimizer(model, config)
    adv = spec.training_attack(config) if isinstance(spec, NamedModelSpec) else config.adversarial_training
    rng = np.random.default_rng(seed)
    n = len(dataset)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    step = 0
    log: list[dict] = []
    last_good = model.state_dict()
    started = time.perf_counter()

    def diverged(epoch: int, detail: str) -> TrainingDivergedError:
        path = None
        if out_dir is not None:
            model.load_state_dict(last_good)
            model.cast(np.float64)
            path = out_dir / f"{stem}_last_good.eqrb"
            models.save(model, path)
        logger.error("%s seed=%d diverged in epoch %d: %s", name, seed, epoch, detail)
        return TrainingDivergedError(f"{name} seed={seed} diverged in epoch {epoch}: {detail}", path)

    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss, epoch_correct = 0.0, 0
        model.train()
        with default_dtype(dtype) if float32 else nullcontext():
            for start in range(0, n, config.batch_size):
                idx = order[start:start + config.batch_size]
                x, y = dataset.images[idx], dataset.labels[idx]
                if adv is not None:
                    x = pgd(model, x, y, adv, sample_offset=epoch * n + start)
                model.zero_grad()
                try:
                    logits = model(Tensor(x.astype(dtype)))
                    loss = cross_entropy(logits, y)
                except NonFiniteError as exc:
                    raise diverged(epoch, str(exc)) from exc
                value = float(loss.item())
                if not math.isfinite(value):
                    raise diverged(epoch, f"loss {value}")
                backward(loss)
                optimizer.step(learning_rate(config, step, total_steps))
                step += 1
                epoch_loss += value * len(idx)
                epoch_correct += int(np.sum(np.argmax(logits.data, axis=1) == y))

        last_good = model.state_dict()
        entry = {"model": name, "seed": seed, "epoch": epoch + 1, "loss": epoch_loss / n,
                 "accuracy": epoch_correct / n, "lr": learning_rate(config, step, total_steps),
                 "elapsed_s": round(time.perf_counter() - started, 3)}
        record = append_record(log_path, "epoch", **entry) if log_path else {"type": "epoch", **entry}
        log.append(record)
        logger.info("%s seed=%d epoch %d/%d loss=%.4f acc=%.4f", name, seed, epoch + 1, config.epochs,
                    record["loss"], record["accuracy"])
        if out_dir is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0 \
                and epoch + 1 < config.epochs:
            models.save(model, out_dir / f"{stem}_epoch{epoch + 1}.eqrb")

    if float32:
        model.cast(np.float64)
    model.eval()
    final_acc, final_loss = evaluate(model, dataset)
    checkpoint = digest = None
    if out_dir is not None:
        checkpoint = out_dir / f"{stem}.eqrb"
        digest = models.save(model, checkpoint)
    if log_path:
        log.append(append_record(log_path, "train_done", model=name, seed=seed, initial_loss=initial_loss,
                                 initial_accuracy=initial_acc, final_loss=final_loss, final_accuracy=final_acc,
                                 checkpoint=str(checkpoint) if checkpoint else None, checkpoint_digest=digest,
                                 adversarial_training=adv.model_dump(mode="json") if adv is not None else None))
    logger.info("✅ %s seed=%d done: loss %.4f -> %.4f, train accuracy %.4f", name, seed, initial_loss, final_loss,
                final_acc)
    return TrainResult(model=model, seed=seed, initial_loss=initial_loss, final_loss=final_loss,
                       final_accuracy=final_acc, log=log, checkpoint=checkpoint, checkpoint_digest=digest)


# --- experiment matrix ---------------------------------------------------

@dataclass
class MatrixResult:
    report_path: Path
    rows: list[dict]
    summary: list[dict]


def evaluate_cell(model: Model, name: str, seed: int, eval_set: Dataset, config: RunConfig,
                  threads: int = 1) -> list[ReportRow]:
    """Clean, attacked, corrupted and CLEVER rows for one trained model."""
    rows = []
    images, labels = eval_set.images, eval_set.labels
    clean, _ = evaluate(model, eval_set)
    rows.append(ReportRow(model=name, seed=seed, metric="clean_accuracy", value=clean))

    epsilons = config.attack.epsilons
    for kind in config.attack.kinds:
        acc = adversarial_accuracy(model, images, labels, config.attack.config_for(kind, max(epsilons)),
                                   epsilons, threads=threads)
        rows += [ReportRow(model=name, seed=seed, metric="adversarial_accuracy", value=acc[e], attack=str(kind),
                           epsilon=e) for e in epsilons]

    section = config.corruption
    for kind in section.kinds:
        for severity in section.severities:
            corrupted = corrupt(eval_set, CorruptionSpec(kind=kind, severity=severity, seed=section.seed), threads)
            acc = adversarial_accuracy(model, corrupted.images, labels,
                                       config.attack.config_for(section.attack, max(section.epsilons)),
                                       section.epsilons, threads=threads)
            rows += [ReportRow(model=name, seed=seed, metric="corrupted_accuracy", value=acc[e],
                               attack=str(section.attack), epsilon=e, corruption=str(kind), severity=severity)
                     for e in section.epsilons]

    certify = config.certify
    for i in range(min(certify.n_samples, len(eval_set))):
        score = clever_score(model, images[i], certify, sample_id=i)
        value = score.score if math.isfinite(score.score) else None
        rows.append(ReportRow(model=name, seed=seed, metric="clever_score", value=value, sample_id=i,
                              extra={"predicted": score.predicted, "unbounded": score.unbounded}))
    return rows


def run_matrix(specs: Sequence[NamedModelSpec], train_set: Dataset, eval_set: Dataset, config: RunConfig,
               run_dir: str | Path, threads: int = 1, writer: Optional[ReportWriter] = None) -> MatrixResult:
    """Train every (spec, seed) cell, evaluate it, and aggregate across seeds.

    Cells may run concurrently; their rows are written in cell order so the
    report does not depend on scheduling. A failing cell aborts the matrix
    after marking the report partial.
    """
    if not specs:
        raise ValueError("run_matrix needs at least one model spec")
    classes = {s.num_classes for s in specs}
    if len(classes) != 1:
        raise ValueError(f"all model specs must share num_classes, got {sorted(classes)}")
    run_dir = Path(run_dir)
    seeds = config.train.seeds
    owns_writer = writer is None
    if owns_writer:
        writer = ReportWriter(run_dir, run_metadata(config.model_dump(mode="json"), "matrix", seeds))
    cells = [(spec, seed) for spec in specs for seed in seeds]
    workers = worker_count(threads)

    def run_cell(cell: tuple[NamedModelSpec, int]) -> list[ReportRow]:
        spec, seed = cell
        result = train(spec, train_set, config.train, seed=seed, out_dir=run_dir / "checkpoints",
                       log_path=run_dir / "logs" / f"{spec.name}_seed{seed}.jsonl")
        return evaluate_cell(result.model, spec.name, seed, eval_set, config, threads=1 if workers > 1 else threads)

    written: list[dict] = []
    with ThreadPoolExecutor(max_workers=min(workers, len(cells))) as pool:
        futures = [pool.submit(run_cell, cell) for cell in cells]
        for (spec, seed), future in zip(cells, futures):
            try:
                rows = future.result()
            except Exception as exc:
                for f in futures:
                    f.cancel()
                writer.mark_partial(f"{spec.name} seed={seed}: {exc}")
                logger.error("❌ matrix cell %s seed=%d failed: %s", spec.name, seed, exc)
                raise MatrixAbortedError(f"matrix aborted at {spec.name} seed={seed}: {exc}", writer.path) from exc
            for row in rows:
                written.append(writer.row(row))

    summary = summarize(written)
    for s in summary:
        writer.record("summary", **s)
    if owns_writer:
        writer.mark_complete()
    return MatrixResult(report_path=writer.path, rows=written, summary=summary)
