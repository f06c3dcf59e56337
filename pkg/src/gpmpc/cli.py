"""Command-line entry point: ``gpmpc run``, ``gpmpc compare``, ``gpmpc gp-selftest``."""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_SOLVER_FAULT = 2
EXIT_DIVERGED = 3
EXIT_CONFIG = 4


def _status_code(status: str) -> int:
    from .harness.episode import STATUS_DIVERGED, STATUS_SOLVER_FAULT
    return {STATUS_SOLVER_FAULT: EXIT_SOLVER_FAULT, STATUS_DIVERGED: EXIT_DIVERGED}.get(
        status, EXIT_OK)


def _load(path, seed=None):
    from .harness.config import load_config
    cfg = load_config(path)
    return cfg if seed is None else replace(cfg, seed=seed)


def cmd_run(args) -> int:
    from .harness.episode import run_episode
    from .harness.report import write_episode
    cfg = _load(args.config, args.seed)
    t0 = time.perf_counter()
    result = run_episode(cfg)
    paths = write_episode(result, args.out, figures=not args.no_figures)
    m = result.metrics
    print(f"{cfg.controller} seed {cfg.seed}: status {result.status}, RMS {m['rms']:.4f} m, "
          f"{time.perf_counter() - t0:.1f} s wall")
    if result.message:
        print(result.message)
    print(f"wrote {len(paths)} files to {args.out}")
    return _status_code(result.status)


def cmd_compare(args) -> int:
    from .harness.experiment import compare
    from .harness.report import format_summary, write_comparison
    cfg_a, cfg_b = _load(args.config_a), _load(args.config_b)
    labels = (Path(args.config_a).stem, Path(args.config_b).stem)
    t0 = time.perf_counter()
    report = compare(cfg_a, cfg_b, args.seeds, base_seed=args.seed or 0, labels=labels,
                     jobs=args.jobs)
    write_comparison(report, args.out, figures=not args.no_figures)
    print(format_summary(report), end="")
    print(f"{2 * args.seeds} episodes in {time.perf_counter() - t0:.1f} s; wrote {args.out}")
    codes = [_status_code(r["status"]) for r in report.rows]
    if EXIT_SOLVER_FAULT in codes:
        return EXIT_SOLVER_FAULT
    return EXIT_DIVERGED if EXIT_DIVERGED in codes else EXIT_OK


def cmd_selftest(args) -> int:
    from .harness.selftest import gp_selftest
    ok, rows = gp_selftest(args.batches, args.seed or 0)
    for n, hyper, errs, passed in rows:
        print(f"n={n:2d} sf2={hyper.signal_var:.3g} ell={hyper.length_scale:.3g} "
              f"sn2={hyper.noise_var:.3g}  rel.err mean {errs[0]:.1e} var {errs[1]:.1e} "
              f"loglik {errs[2]:.1e}  {'ok' if passed else 'FAIL'}")
    print("gp-selftest", "passed" if ok else "FAILED")
    return EXIT_OK if ok else EXIT_FAILURE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="simulate one episode")
    p.add_argument("config")
    p.add_argument("--out", default="out")
    p.add_argument("--seed", type=int)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="paired-seed comparison of two configs")
    p.add_argument("config_a")
    p.add_argument("config_b")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed", type=int, help="first seed (default 0)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="out")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gp-selftest", help="state-space GP versus dense GP inference")
    p.add_argument("--batches", type=int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .harness.config import ConfigError
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
