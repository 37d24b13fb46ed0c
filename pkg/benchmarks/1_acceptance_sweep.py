import sys
import os
import time
import csv
import statistics
from pathlib import Path

# --- 1. PATH SETUP ---
# modules live in the repository root
current_dir = os.path.dirname(os.path.abspath(__file__))
parent_dir = os.path.dirname(current_dir)
sys.path.append(parent_dir)

from dotenv import load_dotenv
load_dotenv(os.path.join(parent_dir, ".env"))

try:
    from harness import ConfigError, configure_logging, load_config, load_settings, run
    print("✅ Successfully imported the experiment harness")
except ImportError as e:
    print(f"❌ Critical Error: Could not import harness. Check if harness.py exists in parent dir. {e}")
    sys.exit(1)

# Configuration
RUNS_PER_EXPERIMENT = 1  # the experiments are deterministic; raise for timing statistics only
EXPERIMENTS_DIR = os.path.join(parent_dir, "experiments")


def run_sweep(selected=None):
    print("\n" + "=" * 70)
    print("🧪 ACCEPTANCE SWEEP: every experiment config under experiments/")
    print("=" * 70)

    configure_logging()
    settings = load_settings()
    configs = sorted(Path(EXPERIMENTS_DIR).glob("*.toml"))
    if selected:
        configs = [c for c in configs if c.stem in selected]
    if not configs:
        print("⚠️ No experiment configs found.")
        return 1

    csv_file = os.path.join(parent_dir, "benchmarks", "sweep_results.csv")
    csv_exists = os.path.exists(csv_file)
    out_dir = Path(parent_dir) / settings["output"]["dir"]

    timings = {c.stem: [] for c in configs}
    outcomes = {}

    with open(csv_file, "a", newline="", encoding="utf-8") as csvfile:
        fieldnames = ["experiment", "config", "run_idx", "wall_clock_seconds", "solver_iters", "passed", "timestamp"]
        writer = csv.DictWriter(csvfile, fieldnames=fieldnames)
        if not csv_exists:
            writer.writeheader()

        for run_idx in range(1, RUNS_PER_EXPERIMENT + 1):
            print(f"\n{'=' * 70}")
            print(f"🔄 RUN {run_idx}/{RUNS_PER_EXPERIMENT}")
            print(f"{'=' * 70}")

            for path in configs:
                print(f"\n▶️ {path.name}", end=" ", flush=True)
                start = time.time()
                passed, iters, experiment = False, 0, path.stem
                try:
                    cfg = load_config(path)
                    experiment = cfg.experiment
                    report = run(cfg, settings, out_dir)
                    passed, iters = report.passed, report.solver_iters
                    elapsed = report.wall_clock_seconds
                except ConfigError as e:
                    elapsed = time.time() - start
                    print(f"❌ Config error: {e}")
                except Exception as e:
                    elapsed = time.time() - start
                    print(f"❌ Crash: {e}")

                timings[path.stem].append(elapsed)
                outcomes[path.stem] = outcomes.get(path.stem, True) and passed
                print(f"{'✅' if passed else '❌'} ({elapsed:.1f}s, {iters} CG iterations)")

                writer.writerow({
                    "experiment": experiment,
                    "config": path.name,
                    "run_idx": run_idx,
                    "wall_clock_seconds": round(elapsed, 4),
                    "solver_iters": iters,
                    "passed": passed,
                    "timestamp": time.strftime("%Y-%m-%d %H:%M:%S"),
                })

    print("\n" + "=" * 70)
    print("📊 SWEEP SUMMARY")
    print("=" * 70)
    for name, times in timings.items():
        avg = statistics.mean(times)
        print(f"  {'✅' if outcomes[name] else '❌'} {name:<28} avg={avg:.2f}s, min={min(times):.2f}s, max={max(times):.2f}s")

    total = sum(outcomes.values())
    print("\n" + "=" * 70)
    print(f"{'✅' if total == len(outcomes) else '⚠️'} {total}/{len(outcomes)} experiments passed. Results saved to: {csv_file}")
    print("=" * 70)
    return 0 if total == len(outcomes) else 1


if __name__ == "__main__":
    sys.exit(run_sweep(sys.argv[1:]))
