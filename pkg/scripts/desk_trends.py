#!/usr/bin/env python3
"""
Desk-scale trend checks.
Trains the configured model families over every seed, then measures the
robustness orderings one at a time and prints each with its numbers.

    python scripts/desk_trends.py --config configs/cifar_desk.toml
    python scripts/desk_trends.py --config configs/cifar_desk.toml --reuse   # skip training

Absolute accuracies at this scale are not comparable to full-size runs;
only the direction of each comparison is checked.
"""

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from equirobust import models  # noqa: E402
from equirobust.app import load_config, load_datasets, resolve_config  # noqa: E402
from equirobust.certify import (MisclassifiedSampleError, bootstrap_ci, logits_of,  # noqa: E402
                                max_invariant_perturbation, suppression_diagnostic)
from equirobust.report import append_record, read_rows, render, summarize  # noqa: E402
from equirobust.train import run_matrix  # noqa: E402

TREND_FILE = "trends.jsonl"


def mean_of(summary, model, metric, attack=None, epsilon=None, corruption=None, severity=None):
    for s in summary:
        if (s["model"], s["metric"], s["attack"], s["corruption"], s["severity"]) != \
                (model, metric, attack, corruption, severity):
            continue
        if epsilon is None and s["epsilon"] is None:
            return s["mean"]
        if epsilon is not None and s["epsilon"] is not None and math.isclose(s["epsilon"], epsilon):
            return s["mean"]
    raise KeyError(f"no summary row for {model} {metric} {attack} eps={epsilon} {corruption} {severity}")


def load_checkpoint(config, name, seed):
    spec = next(s for s in config.models if s.name == name)
    path = Path(config.run.out_dir) / "checkpoints" / f"{name}_seed{seed}.eqrb"
    return models.load(path, spec.to_spec().model_copy(update={"seed": seed}))


def correctly_classified(model, dataset, limit):
    keep = []
    for i in range(len(dataset)):
        if int(np.argmax(logits_of(model, dataset.images[i]))) == int(dataset.labels[i]):
            keep.append(i)
            if len(keep) == limit:
                break
    return keep


def fgsm_gap(summary, rot_scale, baseline, eps=0.03):
    a = mean_of(summary, rot_scale, "adversarial_accuracy", "fgsm", eps)
    b = mean_of(summary, baseline, "adversarial_accuracy", "fgsm", eps)
    return a - b >= 0.05, {"parallel_rot_scale": a, "baseline": b, "gap": a - b}


def depth_trend(summary, deep, shallow, eps=0.03):
    a = mean_of(summary, deep, "adversarial_accuracy", "pgd", eps)
    b = mean_of(summary, shallow, "adversarial_accuracy", "pgd", eps)
    return a >= b, {"depth10": a, "depth4": b}


def adversarial_training_gap(summary, trained, standard, eps=0.03):
    a = mean_of(summary, trained, "adversarial_accuracy", "pgd", eps)
    b = mean_of(summary, standard, "adversarial_accuracy", "pgd", eps)
    return a > b, {"baseline_at": a, "baseline": b}


def corruption_ordering(summary, config, rot, baseline, eps=0.01, severity=3):
    kinds = [str(k) for k in config.corruption.kinds]

    def mean_over(model):
        return float(np.mean([mean_of(summary, model, "corrupted_accuracy", "fgsm", eps, k, severity)
                              for k in kinds]))

    a, b = mean_over(rot), mean_over(baseline)
    return a > b, {"parallel_rot": a, "baseline": b, "corruptions": len(kinds)}


def max_invariant_medians(config, eval_set, names, n_probes=50):
    section = config.certify
    attack_config = config.attack.config_for(section.max_invariant_attack, section.epsilon_hi)
    medians = {}
    for name in names:
        values = []
        for seed in config.train.seeds:
            model = load_checkpoint(config, name, seed)
            for i in correctly_classified(model, eval_set, n_probes):
                try:
                    result = max_invariant_perturbation(model, eval_set.images[i], int(eval_set.labels[i]),
                                                        attack_config, section.epsilon_hi, section.tolerance,
                                                        section.monotonicity_probes, sample_id=i)
                except MisclassifiedSampleError:
                    continue
                values.append(result.epsilon)
        medians[name] = float(np.median(values)) if values else float("nan")
    return medians


def max_invariant_trend(config, eval_set, rot_scale, baseline):
    medians = max_invariant_medians(config, eval_set, [rot_scale, baseline])
    return medians[rot_scale] >= medians[baseline], medians


def suppression_comparison(config, eval_set, equivariant, baseline, n_probes=100):
    section = config.diagnose
    seed = config.train.seeds[0]
    eq_model, base_model = load_checkpoint(config, equivariant, seed), load_checkpoint(config, baseline, seed)
    wins = []
    for i in range(min(n_probes, len(eval_set))):
        x = eval_set.images[i]
        eq = suppression_diagnostic(eq_model, x, section.angle_deg, section.trials, section.step, seed, i)
        base = suppression_diagnostic(base_model, x, section.angle_deg, section.trials, section.step, seed, i)
        wins.append(float(eq.ratio > base.ratio))
    estimate, lo, hi = bootstrap_ci(wins, np.mean, seed=seed)
    return estimate >= 0.7, {"fraction": estimate, "ci_low": lo, "ci_high": hi, "n": len(wins)}


def main():
    parser = argparse.ArgumentParser(description="Desk-scale robustness trend checks")
    parser.add_argument("--config", default="configs/cifar_desk.toml")
    parser.add_argument("--out")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--reuse", action="store_true", help="reuse an existing matrix report in the run directory")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    config = resolve_config(load_config(args.config), argparse.Namespace(seed=None, threads=args.threads,
                                                                         out=args.out))
    out_dir = Path(config.run.out_dir)
    train_set, eval_set = load_datasets(config.dataset)
    started = time.perf_counter()

    if args.reuse:
        rows = read_rows(out_dir)
    else:
        rows = run_matrix(config.models, train_set, eval_set, config, out_dir, threads=config.run.threads).rows
        render(out_dir)
    summary = summarize(rows)
    train_minutes = (time.perf_counter() - started) / 60.0

    checks = [
        ("FGSM gap at eps=0.03 (rot+scale vs baseline, >= 5 points)",
         lambda: fgsm_gap(summary, "parallel_rot_scale", "baseline")),
        ("PGD at eps=0.03, 10-layer fully equivariant >= 4-layer",
         lambda: depth_trend(summary, "fully_eq10", "fully_eq4")),
        ("PGD at eps=0.03, PGD-trained baseline > standard baseline",
         lambda: adversarial_training_gap(summary, "baseline_at", "baseline")),
        ("Corruption mean at severity 3, FGSM eps=0.01 (rot > baseline)",
         lambda: corruption_ordering(summary, config, "parallel_rot", "baseline")),
        ("Median max-invariant eps (rot+scale >= baseline)",
         lambda: max_invariant_trend(config, eval_set, "parallel_rot_scale", "baseline")),
        ("Suppression ratio (fully equivariant > baseline on >= 70% of probes)",
         lambda: suppression_comparison(config, eval_set, "fully_eq4", "baseline")),
    ]

    print("\n📋 Trend checks")
    print("=" * 50)
    passed = 0
    for title, check in checks:
        try:
            ok, values = check()
        except (KeyError, FileNotFoundError) as exc:
            print(f"⚠️ {title}: skipped ({exc})")
            append_record(out_dir / TREND_FILE, "trend", check=title, skipped=str(exc))
            continue
        passed += int(ok)
        shown = ", ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in values.items())
        print(f"{'✅' if ok else '❌'} {title}: {shown}")
        append_record(out_dir / TREND_FILE, "trend", check=title, passed=ok, **values)

    print(f"\n⏱️ Matrix time {train_minutes:.1f} min, total {(time.perf_counter() - started) / 60.0:.1f} min")
    print(f"{passed}/{len(checks)} trends hold")
    sys.exit(0 if passed == len(checks) else 1)


if __name__ == "__main__":
    main()
