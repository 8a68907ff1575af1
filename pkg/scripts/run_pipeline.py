#!/usr/bin/env python3
"""
Pipeline runner for equirobust.
Runs train -> attack -> certify -> diagnose -> corrupt-eval -> report as
separate CLI stages and stops at the first failing stage.

    python scripts/run_pipeline.py --config configs/synthetic_minimal.toml
    python scripts/run_pipeline.py --config configs/synthetic_minimal.toml --twice
"""

import argparse
import os
import subprocess
import sys
import time
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from equirobust.report import report_digest  # noqa: E402

STAGES = ["train", "attack", "certify", "diagnose", "corrupt-eval", "report"]


def print_banner(config):
    """Print startup banner."""
    print("🚀 equirobust pipeline")
    print("=" * 50)
    print(f"Config: {config}")
    print()


def check_requirements(config):
    """Check that the config exists and the package is importable."""
    print("🔍 Checking requirements...")
    if not Path(config).exists():
        print(f"❌ Config file not found: {config}")
        return False
    if not (ROOT / ".env").exists():
        print("⚠️ .env file not found; EQUIROBUST_DATA must come from the environment")
    print("✅ All requirements met!")
    return True


def run_stage(stage, config, out, seed=None, threads=None):
    """Run one CLI stage and return its exit code."""
    command = [sys.executable, "-m", "equirobust", stage, "--config", str(config), "--out", str(out)]
    if seed is not None:
        command += ["--seed", str(seed)]
    if threads is not None:
        command += ["--threads", str(threads)]
    env = {**os.environ, "PYTHONPATH": os.pathsep.join(filter(None, [str(ROOT / "src"),
                                                                      os.environ.get("PYTHONPATH")]))}
    print(f"🚀 Stage {stage}...")
    started = time.perf_counter()
    code = subprocess.run(command, env=env, cwd=ROOT).returncode
    elapsed = time.perf_counter() - started
    if code == 0:
        print(f"✅ {stage} finished in {elapsed:.1f}s")
    else:
        print(f"❌ {stage} exited with code {code} after {elapsed:.1f}s")
    return code


def run_pipeline(config, out, seed=None, threads=None):
    for stage in STAGES:
        code = run_stage(stage, config, out, seed, threads)
        if code != 0:
            return code
    return 0


def main():
    parser = argparse.ArgumentParser(description="Run every equirobust stage in order")
    parser.add_argument("--config", required=True)
    parser.add_argument("--out", default="runs/pipeline")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--twice", action="store_true",
                        help="run the pipeline twice and compare report digests")
    args = parser.parse_args()

    print_banner(args.config)
    if not check_requirements(args.config):
        sys.exit(1)

    outs = [Path(args.out)] if not args.twice else [Path(args.out) / "first", Path(args.out) / "second"]
    for out in outs:
        print(f"\n📋 Output directory: {out}")
        code = run_pipeline(args.config, out, args.seed, args.threads)
        if code != 0:
            print("❌ Pipeline stopped")
            sys.exit(code)

    if args.twice:
        digests = [report_digest(out) for out in outs]
        print("\n🔁 Report digests:")
        for out, digest in zip(outs, digests):
            print(f"   {out}: {digest}")
        if digests[0] != digests[1]:
            print("❌ Reports differ between identical runs")
            sys.exit(2)
        print("✅ Reports are identical")

    print("\n👋 Pipeline complete")


if __name__ == "__main__":
    main()
