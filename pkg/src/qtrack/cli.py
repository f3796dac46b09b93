"""Command-line entry point ``qtrack``.

Exit status: 0 on success, 1 on invalid input (configuration, usage or a
failed gradient check), 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .config import load_config
from .errors import UsageError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

log = logging.getLogger("qtrack")


def parse_seeds(text: str) -> list:
    """``"1,2,5-7"`` -> ``[1, 2, 5, 6, 7]``."""
    seeds = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                if hi < lo:
                    raise ValueError
                seeds.extend(range(lo, hi + 1))
            else:
                seeds.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list {text!r}") from None
    if any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError("seeds must be non-negative")
    return seeds


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        v = 0
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


class _Parser(argparse.ArgumentParser):
    """Argument errors are validation failures (status 1), not numerical ones."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=parse_seeds, help="seed list, e.g. 1,2,5-7 (overrides run.seeds)")
    common.add_argument("--out", type=Path, help="output directory (overrides run.output)")
    common.add_argument("--decimation", type=_positive_int, help="log every d-th step (overrides run.decimation)")
    common.add_argument("--strict-positivity", action="store_true",
                        help="fail when a state's smallest eigenvalue drops below -1e-8")
    common.add_argument("--steps", type=_positive_int, help="number of time steps (overrides run.steps)")
    common.add_argument("--workers", type=_positive_int, help="worker processes for multi-seed runs")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="qtrack", description="Online parameter estimation for "
                                     "continuously monitored quantum systems.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "simulate true trajectories and measurement records"),
        ("estimate", "run the online estimator on simulated or replayed records"),
        ("offline-ml", "batch maximum likelihood by full-record gradient ascent"),
        ("gradcheck", "compare recursive and finite-difference gradients"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--config", type=Path, required=True, help="TOML config or a run manifest (.json)")
    p = sub.add_parser("reproduce-figure", parents=[common], help="run a built-in figure configuration")
    p.add_argument("which", choices=sorted(experiments.FIGURES))
    return parser


def _config(args):
    if args.command == "reproduce-figure":
        cfg = experiments.figure_config(args.which)
    else:
        cfg = load_config(args.config)
    return cfg.with_overrides(
        seeds=args.seed, output=str(args.out) if args.out else None, decimation=args.decimation,
        strict_positivity=True if args.strict_positivity else None, steps=args.steps, workers=args.workers,
    )


def _report_seeds(results) -> int:
    status = EXIT_OK
    for r in results:
        if r.error:
            print(f"seed {r.seed}: numerical failure at step {r.error_step}: {r.error}", file=sys.stderr)
            status = EXIT_NUMERICAL
            continue
        parts = ", ".join(f"{n}={st['tail_mean']:.4g}+/-{st['tail_std']:.2g}" for n, st in r.tail.items())
        print(f"seed {r.seed}: tail {parts}")
    return status


def run(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output)
    if args.command == "simulate":
        for seed in cfg.seeds:
            res = experiments.simulate_seed(cfg, seed, out)
            print(f"seed {seed}: {cfg.steps} steps, dy sha256 {res.dy_sha256[:16]}..., wrote {res.files[0]}")
        return EXIT_OK
    if args.command in ("estimate", "reproduce-figure"):
        results = experiments.run_estimate(cfg, out)
        status = _report_seeds(results)
        print(f"wrote {out / 'summary.csv'}")
        return status
    if args.command == "offline-ml":
        for seed in cfg.seeds:
            result, files = experiments.offline_seed(cfg, seed, out)
            est = result.theta_final
            names = cfg.estimator_model().params
            nat = names.to_natural(est)
            vals = ", ".join(f"{n}={v:.6g}" for n, v in zip(names.names, nat))
            state = "converged" if result.converged else "not converged"
            print(f"seed {seed}: {state} after {result.iterations} iterations: {vals}")
        return EXIT_OK
    if args.command == "gradcheck":
        status = EXIT_OK
        for seed in cfg.seeds:
            report = experiments.gradcheck_config(cfg, seed)
            print(f"seed {seed}")
            print(experiments.format_gradcheck(report))
            if report["failed"]:
                print(f"seed {seed}: gradient check failed for {', '.join(report['failed'])}", file=sys.stderr)
                status = EXIT_INVALID
        return status
    raise UsageError(f"unknown command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ArithmeticError as exc:  # degenerate update, positivity loss, failed ascent
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
