"""Run the bundled study configs and print a one-line summary per study.

    python scripts/run_studies.py                 # every config in configs/
    python scripts/run_studies.py refinement -w 4 # one study, four workers
"""
import argparse
import sys
from pathlib import Path

from arratia.experiments import ExperimentConfig, run_experiment, with_overrides

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help="config names without .yaml (default: all)")
    ap.add_argument("-w", "--workers", type=int, default=1)
    ap.add_argument("--replicas", type=int)
    ap.add_argument("--out-dir", default="results")
    args = ap.parse_args()
    names = args.names or sorted(p.stem for p in CONFIGS.glob("*.yaml"))
    for name in names:
        cfg = ExperimentConfig.load(CONFIGS / f"{name}.yaml")
        cfg = with_overrides(cfg, replicas=args.replicas, output=str(Path(args.out_dir) / name))
        rec = run_experiment(cfg, workers=args.workers)
        slope = "" if rec.slope is None else \
            f" slope {rec.slope.slope:.3f} [{rec.slope.ci_low:.3f}, {rec.slope.ci_high:.3f}]"
        print(f"{name}: {len(rec.levels)} levels{slope} ({rec.wall_clock:.1f} s, {rec.status})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
