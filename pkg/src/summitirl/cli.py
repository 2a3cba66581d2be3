"""Command-line entry point: ``summitirl <verb> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import experiments as ex


def _jobs(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("SUMMITIRL_JOBS")
    return max(1, int(env)) if env else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="summitirl",
                                     description="Inverse RL from summary observations: data, inference, benchmarks.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=True):
        p.add_argument("--config", type=Path, help="YAML experiment configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--paper-scale", action="store_true", help="use the full published budgets")
        p.add_argument("--jobs", type=int, help="parallel workers (default: $SUMMITIRL_JOBS or 1)")
        p.add_argument("--overwrite", action="store_true", help="replace existing artifacts")
        if method:
            p.add_argument("--method", choices=ex.METHODS, help="inference method (overrides the config)")

    common(sub.add_parser("generate-data", help="simulate observation and test sets at the ground truth"))
    common(sub.add_parser("benchmark-runtime", help="time the first iteration of each method"), method=False)
    common(sub.add_parser("infer", help="build the likelihood surface, sample the posterior, write metrics"))
    rep = sub.add_parser("report", help="tabulate metrics.json files below a directory")
    rep.add_argument("--out", type=Path, required=True, help="directory searched for metrics.json")
    rep.add_argument("--config", type=Path, help="unused; accepted for symmetry")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            text = ex.report(args.out)
            (args.out / "report.csv").write_text(text)
            sys.stdout.write(text)
            return 0
        experiment = "runtime" if args.command == "benchmark-runtime" else None
        cfg = ex.load_config(args.config, seed=args.seed, method=getattr(args, "method", None),
                             paper_scale=args.paper_scale, experiment=experiment)
        if args.command == "generate-data":
            res = ex.generate_data(cfg, args.out, args.overwrite)
            print(f"wrote {len(res['observations'])} observations to {args.out} "
                  f"(kept fraction {res['kept_fraction']:.3f})")
        elif args.command == "benchmark-runtime":
            res = ex.benchmark_runtime(cfg, args.out, args.overwrite)
            for method, by_w in res["summary"].items():
                cells = ", ".join(f"w={w}: {v['mean_log10']:.2f}" for w, v in by_w.items())
                print(f"{method}: mean log10 s  {cells}")
        else:
            obs, test = ex.load_observations(args.out)
            res = ex.infer(cfg, obs, test, args.out, args.overwrite, _jobs(args.jobs))
            m = res["metrics"]
            print(f"{m['method']}: posterior mean {m['posterior_mean']}, rmse {m['rmse']:.4f}")
    except (ex.ConfigError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
