"""Command-line entry points.

Subcommands:
  run              --config <file>    train all (method, seed, ood_case) combos
  check-gradients  [--trials N]       finite-difference audit of every objective
  verify-theorem1  --spec <file>      information-gap check on a discrete spec
  report           --dir <outputs>    rebuild the summary table from run CSVs

Exit codes: 0 success, 1 validation error, 2 acceptance-property failure,
3 divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from .analysis import Theorem1SpecError, to_bits
from .harness import (
    ConfigError,
    check_gradients,
    parse_config,
    rebuild_report,
    render_summary_table,
    run_experiment,
    verify_theorem1,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_PROPERTY = 2
EXIT_DIVERGENCE = 3


def _cmd_run(args) -> int:
    try:
        config = parse_config(args.config)
    except (OSError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        report = run_experiment(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(render_summary_table(report.summary), end="")
    print(f"summary written to {report.summary_path}")
    if report.any_divergence:
        for o in report.outcomes:
            if o.diverged:
                print(f"divergence: method={o.method} seed={o.seed} case={o.ood_case:.2f}")
        return EXIT_DIVERGENCE
    return EXIT_OK


def _cmd_check_gradients(args) -> int:
    report = check_gradients(n_trials=args.trials, seed=args.seed)
    for name, err in sorted(report.max_errors.items()):
        status = "FAIL" if name in report.failures else "ok"
        print(f"{status:4s}  {name:16s} max relative error {err:.3e} (tol {report.tolerance:g})")
    if report.failures:
        print("gradient check FAILED for: " + ", ".join(report.failures))
        return EXIT_PROPERTY
    print(f"gradient check passed on {report.trials} randomized instances")
    return EXIT_OK


def _cmd_verify_theorem1(args) -> int:
    try:
        report = verify_theorem1(args.spec)
    except (OSError, Theorem1SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    unit = "bits" if args.bits else "nats"
    conv = to_bits if args.bits else (lambda x: x)
    print(f"lhs   (mean personalized MI) = {conv(report.lhs):.6f} {unit}")
    print(f"rhs   (mean global MI + p*delta) = {conv(report.rhs):.6f} {unit}")
    print(f"p = {report.p:.4f}  delta = {conv(report.delta):.6f} {unit}")
    for entry in report.per_client:
        extra = "" if entry["delta_j"] is None else f"  delta_j={conv(entry['delta_j']):.6f}"
        print(
            f"  client {entry['client']}: best subset {entry['phi_star']} "
            f"MI={conv(entry['mi_personalized']):.6f}{extra}"
        )
    if not report.applicable:
        print(f"spec inapplicable: {report.note}")
        return EXIT_OK
    if report.note:
        print(f"note: {report.note}")
    print(f"holds = {report.holds}")
    return EXIT_OK if report.holds else EXIT_PROPERTY


def _cmd_report(args) -> int:
    try:
        summary = rebuild_report(args.dir)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.json:
        print(json.dumps(summary, indent=2, sort_keys=True))
    else:
        print(render_summary_table(summary), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="perinvfl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("--config", required=True)
    p_run.set_defaults(func=_cmd_run)

    p_check = sub.add_parser("check-gradients", help="finite-difference gradient audit")
    p_check.add_argument("--trials", type=int, default=20)
    p_check.add_argument("--seed", type=int, default=0)
    p_check.set_defaults(func=_cmd_check_gradients)

    p_thm = sub.add_parser("verify-theorem1", help="check the information-gap bound on a spec file")
    p_thm.add_argument("--spec", required=True)
    p_thm.add_argument("--bits", action="store_true", help="display MI in bits instead of nats")
    p_thm.set_defaults(func=_cmd_verify_theorem1)

    p_rep = sub.add_parser("report", help="rebuild the summary from run CSVs")
    p_rep.add_argument("--dir", required=True)
    p_rep.add_argument("--json", action="store_true")
    p_rep.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
