"""
equirobust command line: train, attack, certify, diagnose, corrupt-eval,
report and matrix, all driven by one TOML run config.

    python -m equirobust train --config configs/synthetic_minimal.toml
    python -m equirobust attack --config configs/synthetic_minimal.toml --kind fgsm

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import models
from .attacks import adversarial_accuracy
from .certify import (MisclassifiedSampleError, bootstrap_ci, clever_score,
                      max_invariant_perturbation, orbit_gradient_table, suppression_diagnostic, theorem1_check)
from .data import Dataset, DatasetError, corrupt, find_cifar_files, load_cifar_dir, make_synthetic, subsample
from .models import Model
from .report import ReportError, ReportWriter, render, run_metadata
from .schemas import (CONFIG_SCHEMA, ArchitectureId, AttackKind, CorruptionKind, CorruptionSpec, DatasetSection,
                      ReportRow, RunConfig)
from .train import run_matrix, train, worker_count

# Load environment variables - override system variables
load_dotenv(override=True)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RESOLVED_CONFIG = "resolved_config.json"


class ConfigError(ValueError):
    """The run config cannot be parsed or validated."""

    def __init__(self, message: str, line: Optional[int] = None, column: Optional[int] = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line, self.column = line, column


class UsageError(ValueError):
    """The command was invoked with inputs it cannot work on."""


# --- configuration -------------------------------------------------------

def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a TOML run config; syntax errors carry line and column."""
    path = Path(path)
    try:
        with path.open("rb") as fh:
            document = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except tomllib.TOMLDecodeError as exc:
        line, column = getattr(exc, "lineno", None), getattr(exc, "colno", None)
        match = re.search(r"at line (\d+), column (\d+)", str(exc))
        if line is None and match:
            line, column = int(match.group(1)), int(match.group(2))
        raise ConfigError(f"{path}: {getattr(exc, 'msg', exc)}", line, column) from exc
    document.pop("schema", None)
    return RunConfig.model_validate(document)


def _env_threads() -> Optional[int]:
    value = os.getenv("EQUIROBUST_THREADS")
    if not value:
        return None
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f"EQUIROBUST_THREADS must be an integer, got {value!r}") from exc


def resolve_config(config: RunConfig, args: argparse.Namespace) -> RunConfig:
    """Apply CLI flag > config file > environment > default precedence."""
    doc = config.model_dump(mode="json")
    run = doc["run"]
    seed = args.seed if getattr(args, "seed", None) is not None else run["seed"]
    if seed is not None:
        run["seed"] = seed
        doc["train"]["seeds"] = [seed]
        for section in ("dataset", "attack", "certify", "corruption"):
            doc[section]["seed"] = seed
    threads = getattr(args, "threads", None) or run["threads"] or _env_threads()
    run["threads"] = worker_count(threads)
    if getattr(args, "out", None):
        run["out_dir"] = str(args.out)
    if doc["dataset"]["path"] is None and os.getenv("EQUIROBUST_DATA"):
        doc["dataset"]["path"] = os.getenv("EQUIROBUST_DATA")
    return RunConfig.model_validate(doc)


def write_resolved(config: RunConfig, out_dir: Path) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG
    path.write_text(json.dumps({"schema": CONFIG_SCHEMA, **config.model_dump(mode="json")}, indent=2,
                               sort_keys=True), encoding="utf-8")
    return path


# --- datasets ------------------------------------------------------------

def _synthetic(section: DatasetSection) -> tuple[Dataset, Dataset]:
    kw = dict(image_size=section.image_size, num_classes=section.num_classes, channels=section.channels)
    train_set = make_synthetic(section.synthetic_kind, section.n_synthetic, seed=section.seed, split="train", **kw)
    eval_set = make_synthetic(section.synthetic_kind, section.n_eval, seed=section.seed + 1, split="test", **kw)
    return train_set, eval_set


def load_datasets(section: DatasetSection) -> tuple[Dataset, Dataset]:
    """Training and evaluation sets; missing CIFAR files fall back to synthetic data."""
    if section.source == "synthetic":
        return _synthetic(section)
    try:
        if section.path is None:
            raise DatasetError("no dataset path configured and EQUIROBUST_DATA is unset")
        find_cifar_files(section.path, section.source, "train")
    except DatasetError as exc:
        logger.warning("⚠️ %s unavailable (%s); falling back to synthetic %s", section.source, exc,
                       section.synthetic_kind)
        return _synthetic(section)
    train_set = load_cifar_dir(section.path, section.source, "train")
    if section.n_per_class:
        train_set = subsample(train_set, section.n_per_class, section.seed)
    eval_set = load_cifar_dir(section.path, section.source, "test")
    eval_set = eval_set.take(np.arange(min(section.n_eval, len(eval_set))), split="test")
    return train_set, eval_set


# --- commands ------------------------------------------------------------

class Run:
    """Resolved config, output directory and report writer for one command."""

    def __init__(self, command: str, config: RunConfig, args: argparse.Namespace):
        self.command, self.config, self.args = command, config, args
        self.out_dir = Path(config.run.out_dir)
        self.threads = config.run.threads or 1
        self.writer: Optional[ReportWriter] = None
        if command == "report":
            if self.out_dir.is_dir():
                write_resolved(config, self.out_dir)
            return
        write_resolved(config, self.out_dir)
        pgd = {"steps": config.attack.steps, "step_size": config.attack.step_size,
               "random_start": config.attack.random_start}
        self.writer = ReportWriter(self.out_dir, run_metadata(config.model_dump(mode="json"), command,
                                                              config.train.seeds, threads=self.threads, pgd=pgd))

    def checkpoints(self) -> Iterator[tuple[str, int, Model]]:
        """(name, seed, model) for --checkpoint, or for every configured model and seed."""
        if self.args.checkpoint:
            model = models.load(self.args.checkpoint)
            yield Path(self.args.checkpoint).stem, model.spec.seed, model
            return
        if not self.config.models:
            raise UsageError("no [[models]] in the config and no --checkpoint given")
        for spec in self.config.models:
            for seed in self.config.train.seeds:
                path = self.out_dir / "checkpoints" / f"{spec.name}_seed{seed}.eqrb"
                if not path.exists():
                    raise FileNotFoundError(f"checkpoint {path} not found; run `train` first")
                yield spec.name, seed, models.load(path, spec.to_spec().model_copy(update={"seed": seed}))

    def probes(self, n: int) -> Dataset:
        _, eval_set = load_datasets(self.config.dataset)
        return eval_set.take(np.arange(min(n, len(eval_set))), split="probe")


def cmd_train(run: Run) -> int:
    if not run.config.models:
        raise UsageError("no [[models]] in the config")
    train_set, _ = load_datasets(run.config.dataset)
    for spec in run.config.models:
        for seed in run.config.train.seeds:
            result = train(spec, train_set, run.config.train, seed=seed, out_dir=run.out_dir / "checkpoints",
                           log_path=run.out_dir / "train_log.jsonl")
            run.writer.row(ReportRow(model=spec.name, seed=seed, metric="train_accuracy",
                                     value=result.final_accuracy,
                                     extra={"checkpoint_digest": result.checkpoint_digest}))
            run.writer.row(ReportRow(model=spec.name, seed=seed, metric="train_loss", value=result.final_loss))
    return EXIT_OK


def cmd_attack(run: Run) -> int:
    section = run.config.attack
    kinds = [run.args.kind] if run.args.kind else list(section.kinds)
    if any(k not in {a.value for a in AttackKind} for k in kinds):
        raise UsageError(f"--kind must be one of {[a.value for a in AttackKind]} for attack")
    _, eval_set = load_datasets(run.config.dataset)
    for name, seed, model in run.checkpoints():
        results = {}
        for kind in kinds:
            if section.epsilons == [0.0]:
                acc = adversarial_accuracy(model, eval_set.images, eval_set.labels,
                                           section.config_for(kind, 0.0), [0.0], threads=run.threads)
                run.writer.row(ReportRow(model=name, seed=seed, metric="clean_accuracy", value=acc[0.0]))
                break
            results[kind] = adversarial_accuracy(model, eval_set.images, eval_set.labels,
                                                 section.config_for(kind, max(section.epsilons)), section.epsilons,
                                                 threads=run.threads)
            for eps in section.epsilons:
                run.writer.row(ReportRow(model=name, seed=seed, metric="adversarial_accuracy",
                                         value=results[kind][eps], attack=kind, epsilon=eps))
        if {AttackKind.FGSM.value, AttackKind.PGD.value} <= set(results):
            for eps in section.epsilons:
                fgsm_acc, pgd_acc = results["fgsm"][eps], results["pgd"][eps]
                if pgd_acc > fgsm_acc:
                    logger.warning("⚠️ %s seed=%d eps=%.3f: PGD accuracy %.4f above FGSM %.4f", name, seed, eps,
                                   pgd_acc, fgsm_acc)
                    run.writer.record("flag", model=name, seed=seed, epsilon=eps, check="pgd_not_above_fgsm",
                                      fgsm=fgsm_acc, pgd=pgd_acc)
    return EXIT_OK


def cmd_certify(run: Run) -> int:
    section = run.config.certify
    n = run.args.samples if run.args.samples is not None else section.n_samples
    if n <= 0:
        raise UsageError("certify needs n_samples > 0")
    probes = run.probes(n)
    attack_config = run.config.attack.config_for(section.max_invariant_attack, section.epsilon_hi)
    for name, seed, model in run.checkpoints():
        for i in range(len(probes)):
            score = clever_score(model, probes.images[i], section, sample_id=i)
            run.writer.record("clever", model=name, seed=seed, **score.model_dump(mode="json"))
            run.writer.row(ReportRow(model=name, seed=seed, metric="clever_score", sample_id=i,
                                     value=score.score if np.isfinite(score.score) else None,
                                     extra={"unbounded": score.unbounded}))
            try:
                result = max_invariant_perturbation(model, probes.images[i], int(probes.labels[i]), attack_config,
                                                    section.epsilon_hi, section.tolerance,
                                                    section.monotonicity_probes, sample_id=i)
            except MisclassifiedSampleError:
                logger.debug("%s: sample %d misclassified, no max-invariant epsilon", name, i)
                continue
            run.writer.record("max_invariant", model=name, seed=seed, **result.model_dump(mode="json"))
            run.writer.row(ReportRow(model=name, seed=seed, metric="max_invariant_epsilon", sample_id=i,
                                     value=result.epsilon, attack=result.attack,
                                     extra={"non_monotone": result.non_monotone}))
    return EXIT_OK


def cmd_diagnose(run: Run) -> int:
    section = run.config.diagnose
    n = run.args.samples if run.args.samples is not None else section.n_probes
    if n <= 0:
        raise UsageError("diagnose needs a non-empty probe set")
    probes = run.probes(n)
    for name, seed, model in run.checkpoints():
        equivariant = model.architecture_id == ArchitectureId.FULLY_EQUIVARIANT.value
        ratios = []
        for i in range(len(probes)):
            x = probes.images[i]
            if equivariant:
                report = theorem1_check(model, x, section.tolerance, section.q, sample_id=i)
            else:
                report = orbit_gradient_table(model, x, section.q, sample_id=i)
            suppression = suppression_diagnostic(model, x, section.angle_deg, section.trials, section.step,
                                                 seed=seed, sample_id=i)
            report.suppression_ratio = suppression.ratio
            report.on_orbit_change = suppression.on_orbit_change
            report.off_orbit_change = suppression.off_orbit_change
            ratios.append(suppression.ratio)
            run.writer.record("diagnostics", model=name, seed=seed, **report.model_dump(mode="json"))
            run.writer.row(ReportRow(model=name, seed=seed, metric="orbit_max_deviation", sample_id=i,
                                     value=report.max_deviation,
                                     extra={"theorem1_passed": report.theorem1_passed}))
            run.writer.row(ReportRow(model=name, seed=seed, metric="suppression_ratio", sample_id=i,
                                     value=suppression.ratio if np.isfinite(suppression.ratio) else None))
        finite = [r for r in ratios if np.isfinite(r)]
        if finite:
            estimate, lo, hi = bootstrap_ci(finite, np.median, seed=seed)
            run.writer.record("suppression_summary", model=name, seed=seed, median=estimate, ci_low=lo, ci_high=hi,
                              n=len(finite))
            logger.info("%s seed=%d suppression ratio median %.3f [%.3f, %.3f]", name, seed, estimate, lo, hi)
    return EXIT_OK


def cmd_corrupt_eval(run: Run) -> int:
    section = run.config.corruption
    kinds = [run.args.kind] if run.args.kind else list(section.kinds)
    if any(k not in {c.value for c in CorruptionKind} for k in kinds):
        raise UsageError(f"--kind must be one of {[c.value for c in CorruptionKind]} for corrupt-eval")
    _, eval_set = load_datasets(run.config.dataset)
    corrupted = {(kind, severity): corrupt(eval_set, CorruptionSpec(kind=kind, severity=severity, seed=section.seed),
                                           run.threads)
                 for kind in kinds for severity in section.severities}
    attack_config = run.config.attack.config_for(section.attack, max(section.epsilons))
    for name, seed, model in run.checkpoints():
        for (kind, severity), dataset in corrupted.items():
            acc = adversarial_accuracy(model, dataset.images, dataset.labels, attack_config, section.epsilons,
                                       threads=run.threads)
            for eps in section.epsilons:
                run.writer.row(ReportRow(model=name, seed=seed, metric="corrupted_accuracy", value=acc[eps],
                                         attack=str(section.attack), epsilon=eps, corruption=kind,
                                         severity=severity))
    return EXIT_OK


def cmd_report(run: Run) -> int:
    for path in render(run.out_dir):
        print(f"📄 {path}")
    return EXIT_OK


def cmd_matrix(run: Run) -> int:
    if not run.config.models:
        raise UsageError("no [[models]] in the config")
    train_set, eval_set = load_datasets(run.config.dataset)
    result = run_matrix(run.config.models, train_set, eval_set, run.config, run.out_dir, threads=run.threads,
                        writer=run.writer)
    render(run.out_dir)
    logger.info("✅ matrix wrote %d rows to %s", len(result.rows), result.report_path)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "certify": cmd_certify,
    "diagnose": cmd_diagnose,
    "corrupt-eval": cmd_corrupt_eval,
    "report": cmd_report,
    "matrix": cmd_matrix,
}


# --- entry point ---------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"❌ {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="equirobust", description="Adversarial robustness lab for equivariant CNNs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML run config")
        p.add_argument("--out", help="output directory (overrides [run].out_dir)")
        p.add_argument("--seed", type=int, help="overrides every seed in the config")
        p.add_argument("--threads", type=int, help="worker threads, capped at the physical core count")
        p.add_argument("--checkpoint", help="evaluate this checkpoint instead of the configured models")
        p.add_argument("--kind", help="attack kind (attack) or corruption kind (corrupt-eval)")
        p.add_argument("--samples", type=int, help="probe count for certify/diagnose")
        p.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        config = resolve_config(load_config(args.config), args)
        run = Run(args.command, config, args)
        code = COMMANDS[args.command](run)
    except (ConfigError, ValidationError, UsageError, ReportError) as exc:
        logger.error("❌ %s", exc)
        return EXIT_USAGE
    except Exception as exc:
        logger.exception("❌ %s failed: %s", args.command, exc)
        return EXIT_RUNTIME
    if run.writer is not None:
        run.writer.mark_complete()
    return code


if __name__ == "__main__":
    sys.exit(main())
