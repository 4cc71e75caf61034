"""Command-line entry point.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numeric or runtime error.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace

from .config import RunConfig
from .errors import ConfigurationError, HmmoeError
from .harness import (
    ABLATION_KINDS,
    ablation_report_files,
    emit_reports,
    run_ablation,
    run_report_files,
    train_run,
)
from .verify import SUITES, run_suites

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def _load(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        n = len(cfg.training.seeds)
        cfg = replace(cfg, training=replace(cfg.training,
                                            seeds=tuple(args.seed + i for i in range(n))),
                      task=replace(cfg.task, seed=args.seed))
    return cfg


def _out_dir(args, cfg: RunConfig, default: str) -> str:
    return args.out or cfg.output_dir or default


def cmd_train(args) -> int:
    cfg = _load(args)
    seed = cfg.training.seeds[0]
    m = cfg.model
    t0 = time.perf_counter()
    run = train_run(m.layers, m.dim, m.classes, cfg.hmmoe, cfg.task, cfg.training, seed)
    out = _out_dir(args, cfg, "runs/train")
    emit_reports(out, run_report_files(cfg, [run]))
    print(f"seed {seed}: test accuracy {run.test_accuracy:.4f} "
          f"(trainable fraction {run.ledger['fraction']:.4f}, {time.perf_counter() - t0:.1f}s)")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.kind not in ABLATION_KINDS:
        raise ConfigurationError(f"unknown ablation kind {args.kind!r}; "
                                 f"choose from {', '.join(ABLATION_KINDS)}", "kind")
    cfg = _load(args)
    report = run_ablation(args.kind, cfg, workers=args.workers)
    out = _out_dir(args, cfg, f"runs/ablate-{args.kind}")
    emit_reports(out, ablation_report_files(report))
    print(f"{'arm':<16} {'mean':>7} {'std':>7} {'trainable':>10} {'fraction':>9}")
    for arm in report.arms:
        print(f"{arm.name:<16} {arm.mean:7.4f} {arm.std:7.4f} "
              f"{arm.ledger['trainable']:10d} {arm.ledger['fraction']:9.4f}")
    print(f"reports written to {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites(args.scope, seed=args.seed or 0)
    failures = 0
    print(f"{'suite':<11} {'check':<42} {'value':>12} {'tol':>9}  result")
    for suite, r in results:
        failures += not r.passed
        status = "PASS" if r.passed else "FAIL"
        print(f"{suite:<11} {r.name:<42} {r.value:12.3e} {r.tol:9.1e}  {status}"
              + (f"  ({r.detail})" if r.detail else ""))
    if failures:
        print(f"{failures} check(s) failed:", file=sys.stderr)
        for suite, r in results:
            if not r.passed:
                print(f"  {suite}/{r.name}: value {r.value:.3e} vs tol {r.tol:.1e}",
                      file=sys.stderr)
        return EXIT_VERIFY
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmmoe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        if config_required:
            p.add_argument("--config", required=True, help="JSON run configuration")
            p.add_argument("--out", help="output directory for report files")
            p.add_argument("--workers", type=int, default=1,
                           help="parallel training jobs (ablations only)")
        p.add_argument("--seed", type=int, help="override the top-level seed")

    p = sub.add_parser("train", help="run one training job and write reports")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run an ablation protocol")
    common(p)
    p.add_argument("--kind", required=True, help=f"one of {', '.join(ABLATION_KINDS)}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("verify", help="run built-in verification suites")
    p.add_argument("--scope", default="all", choices=[*SUITES, "all"])
    common(p, config_required=False)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as e:
        where = f" [{e.field}]" if e.field else ""
        print(f"configuration error{where}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (HmmoeError, ArithmeticError, OSError, RuntimeError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
