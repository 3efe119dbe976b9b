"""Command line: ``arratia run CONFIG``, ``arratia census``, ``arratia validate-config CONFIG``."""
from __future__ import annotations

import argparse
import sys

from .experiments import ConfigError, ExperimentConfig, emit, output_paths, run_experiment, \
    with_overrides

EXIT_CONFIG = 2
EXIT_PARTIAL = 3


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--replicas", type=int, help="override the replica count")
    p.add_argument("--out", help="output stem (.csv / .json are appended)")
    p.add_argument("--format", choices=("csv", "json"),
                   help="write only this format (default: both, or csv on stdout)")
    p.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="arratia", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the study described by a YAML config")
    run.add_argument("config")
    _common(run)
    cen = sub.add_parser("census", help="empirical coalescence-scheme frequencies")
    cen.add_argument("--n", type=int, default=3, help="number of particles (default 3)")
    cen.add_argument("--spacing", type=float, default=1.0, help="start-point gap (default 1)")
    cen.add_argument("--t", type=float, default=1.0, help="time horizon (default 1)")
    _common(cen)
    val = sub.add_parser("validate-config", help="parse and check a config without running it")
    val.add_argument("config")
    return ap


def _finish(cfg: ExperimentConfig, args) -> int:
    out = args.out or cfg.output
    record = run_experiment(with_overrides(cfg, output=""), workers=args.workers)
    if out:
        paths = output_paths(out)
        for fmt in ([args.format] if args.format else ["csv", "json"]):
            print(f"wrote {emit(record, fmt, paths[fmt])}", file=sys.stderr)
    else:
        sys.stdout.write(record.to_json() if args.format == "json" else record.to_csv())
    if record.status != "ok":
        print(f"{record.status}: {record.failed} of {cfg.replicas} replicas failed",
              file=sys.stderr)
        return EXIT_PARTIAL
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate-config":
            cfg = ExperimentConfig.load(args.config)
            print(f"ok: {cfg.kind} config, digest {cfg.digest()}")
            return 0
        if args.command == "run":
            cfg = ExperimentConfig.load(args.config)
        else:
            cfg = ExperimentConfig("scheme-census", m=args.n, t=args.t,
                                   start_points=[i * args.spacing for i in range(args.n)],
                                   replicas=args.replicas or 10_000)
        cfg = with_overrides(cfg, seed=args.seed, replicas=args.replicas)
        return _finish(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
