"""Command-line front end: simulate, fit, icc, test, correlate.

Batch workflows only; every command reads and writes files under the given
paths and prints a small machine-parseable summary to stdout. Diagnostics go
to stderr. Exit codes: 0 success, 2 usage or input error, 3 model
precondition violated, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import yaml

from . import FORMAT_VERSION, __version__
from .errors import (
    AsymmetricMatrixError,
    ComponentMismatchError,
    DegenerateSpectrumError,
    DimensionError,
    DuplicateKeyError,
    EmptyDataError,
    GridMismatchError,
    IncompleteCurveError,
    InsufficientDataError,
    InvalidBasisError,
    InvalidGridError,
    InvalidParameterError,
    MissingMeanError,
    ParseError,
    SingularSystemError,
    UnbalancedDesignError,
    UndefinedCorrelationError,
    UndefinedIccError,
)
from .fpca import DEFAULT_BANDWIDTH, FpcaFit
from .icc import icc_report
from .ingest import (
    read_fit,
    read_long_csv,
    write_fit,
    write_json,
    write_long_csv,
)
from .leveltest import METHODS, two_sample_score_test, score_covariate_correlation
from .mfpca import FitConfig, fit_nested
from .simkl import generate, spec_from_dict

_INPUT_ERRORS = (
    ParseError,
    DuplicateKeyError,
    IncompleteCurveError,
    InvalidParameterError,
    InvalidBasisError,
    InvalidGridError,
    GridMismatchError,
    MissingMeanError,
    ComponentMismatchError,
    EmptyDataError,
    FileNotFoundError,
    NotADirectoryError,
)
_PRECONDITION_ERRORS = (UnbalancedDesignError, InsufficientDataError)
_NUMERICAL_ERRORS = (
    SingularSystemError,
    DegenerateSpectrumError,
    AsymmetricMatrixError,
    DimensionError,
    UndefinedIccError,
    UndefinedCorrelationError,
    np.linalg.LinAlgError,
    FloatingPointError,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PRECONDITION = 3
EXIT_NUMERICAL = 4

SIMULATED_CHANNEL = "sim"


def _apply_thread_cap() -> None:
    """Honor MFDA_THREADS by capping BLAS thread pools when possible."""
    cap = os.environ.get("MFDA_THREADS")
    if not cap:
        return
    try:
        limit = max(1, int(cap))
    except ValueError:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limit)
    except ImportError:
        pass


def _fmt(x: float) -> str:
    return repr(float(x))


def cmd_simulate(args: argparse.Namespace) -> int:
    spec_path = Path(args.spec)
    if not spec_path.exists():
        raise FileNotFoundError(f"spec file not found: {spec_path}")
    with open(spec_path, "r", encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ParseError(f"cannot parse spec file {spec_path}: {exc}") from None
    if args.seed is not None:
        data = dict(data)
        data["seed"] = args.seed
    spec = spec_from_dict(data)
    curves, truth = generate(spec)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_long_csv(curves, out / "data.csv", args.channel)
    write_json(
        out / "truth.json",
        {
            "analytic_icc": truth.analytic_icc,
            "noise_variance": spec.noise_variance,
            "eigenvalues": [
                [float(v) for v in lvl.eigenvalues] for lvl in spec.levels
            ],
            "scores": [s.tolist() for s in truth.scores],
            "seed": spec.seed,
        },
    )
    write_json(
        out / "manifest.json",
        {
            "format_version": FORMAT_VERSION,
            "library_version": __version__,
            "command": "simulate",
            "channel": args.channel,
            "seed": spec.seed,
            "spec": spec.to_dict(),
        },
    )
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    data_path = Path(args.data)
    if not data_path.exists():
        raise FileNotFoundError(f"data file not found: {data_path}")
    curves, report = read_long_csv(data_path, args.channel, args.grid_policy)
    smooth = args.smooth is not None
    config = FitConfig(
        levels=args.levels,
        pve=args.pve,
        smooth=smooth,
        bandwidth=args.smooth if smooth else DEFAULT_BANDWIDTH,
        center_measures=not args.no_measure_means,
    )
    fit = fit_nested(curves, config)
    write_fit(
        fit,
        args.out,
        extra_manifest={
            "command": "fit",
            "channel": args.channel,
            "data": str(args.data),
            "grid_policy": args.grid_policy,
        },
    )
    counts = curves.design_counts()
    n = len(counts)
    J = len(next(iter(counts.values())))
    K_rep = next(iter(next(iter(counts.values())).values()))
    lines = [
        f"levels: {fit.levels}",
        f"subjects: {n}",
        f"measures: {J}",
        f"replicates: {K_rep}",
        f"grid_points: {fit.grid.size}",
    ]
    for level, k in enumerate(fit.retained, start=1):
        lines.append(f"retained_level{level}: {k}")
    lines.append(f"noise_variance: {_fmt(fit.noise_variance)}")
    for name, share in fit.variance_shares().items():
        lines.append(f"variance_share_{name}: {_fmt(share)}")
    if report.dropped_points:
        lines.append(f"dropped_grid_points: {len(report.dropped_points)}")
    print("\n".join(lines))
    return EXIT_OK


def cmd_icc(args: argparse.Namespace) -> int:
    fit = read_fit(args.fit_dir)
    if isinstance(fit, FpcaFit):
        raise ParseError("ICC needs a two- or three-level fit directory")
    report = icc_report(fit)
    out = Path(args.fit_dir)
    write_json(
        out / "icc.json",
        {
            "global_icc": report.global_icc,
            "level_variances": list(report.level_variances),
            "noise_variance": report.noise_variance,
        },
    )
    with open(out / "pointwise_icc.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", "icc"])
        for t, v in zip(fit.grid.points, report.pointwise.values):
            writer.writerow([_fmt(t), _fmt(v)])
    print(f"{report.global_icc:.2f}")
    return EXIT_OK


def cmd_test(args: argparse.Namespace) -> int:
    fit = read_fit(args.fit_dir)
    if isinstance(fit, FpcaFit) or fit.levels < 2:
        raise ParseError("the level test needs a fit with level-2 scores")
    group_a = list(dict.fromkeys(args.group_a))
    group_b = list(dict.fromkeys(args.group_b))
    overlap = set(group_a) & set(group_b)
    if overlap:
        raise InvalidParameterError(
            f"groups overlap on measure ids: {sorted(overlap)}"
        )
    known = set(fit.measure_labels)
    unknown = [g for g in group_a + group_b if g not in known]
    if unknown:
        raise InvalidParameterError(
            f"unknown measure ids {unknown}; known ids: "
            f"{sorted(known, key=str)}"
        )
    label_of = {j + 1: lab for j, lab in enumerate(fit.measure_labels)}
    rows_a = [
        r
        for r, unit in enumerate(fit.units[1])
        if label_of[unit[1]] in group_a
    ]
    rows_b = [
        r
        for r, unit in enumerate(fit.units[1])
        if label_of[unit[1]] in group_b
    ]
    scores = fit.scores[1]
    report = two_sample_score_test(
        scores[rows_a],
        scores[rows_b],
        method=args.method,
        n_permutations=args.perms,
        seed=args.seed,
    )
    write_json(
        Path(args.fit_dir) / "test_report.json",
        {
            "method": report.method,
            "n_permutations": report.n_permutations,
            "pvalue_method": report.pvalue_method,
            "seed": report.seed,
            "group_a": group_a,
            "group_b": group_b,
            "global_p": report.global_p,
            "per_score": [
                {
                    "component": r.component,
                    "statistic": r.statistic,
                    "p_raw": r.p_raw,
                    "p_adjusted": r.p_adjusted,
                    "degenerate": r.degenerate,
                }
                for r in report.per_score
            ],
        },
    )
    print(f"{report.global_p:.4f}")
    return EXIT_OK


def cmd_correlate(args: argparse.Namespace) -> int:
    fit = read_fit(args.fit_dir)
    if isinstance(fit, FpcaFit):
        raise ParseError("correlate needs a multilevel fit directory")
    cov_path = Path(args.covariate)
    if not cov_path.exists():
        raise FileNotFoundError(f"covariate file not found: {cov_path}")
    by_subject: dict[str, float] = {}
    with open(cov_path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {
            "subject",
            "value",
        }:
            raise ParseError(f"{cov_path}: header must be subject,value")
        for record in reader:
            try:
                by_subject[record["subject"]] = float(record["value"])
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{cov_path}:{reader.line_num}: {exc}") from None
    missing = [s for s in fit.subject_labels if s not in by_subject]
    if missing:
        raise ParseError(f"covariate file lacks subjects: {missing}")
    level = args.level
    scores = fit.scores[level - 1]
    units = fit.units[level - 1]
    covariate = np.array(
        [by_subject[fit.subject_labels[u[0] - 1]] for u in units]
    )
    results = score_covariate_correlation(scores, covariate)
    out_path = Path(args.fit_dir) / "score_correlation.csv"
    lines = ["component,spearman_rho,p_value"]
    lines += [f"{r.component},{_fmt(r.rho)},{_fmt(r.pvalue)}" for r in results]
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfda",
        description=(
            "Multilevel functional PCA: simulate nested curve data, fit "
            "variance-decomposition models, compute functional ICCs, and "
            "test score distributions between groups of sessions."
        ),
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("spec", help="generator spec YAML file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override spec seed")
    p.add_argument(
        "--channel", default=SIMULATED_CHANNEL, help="channel name to write"
    )
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("fit", help="fit a nested multilevel model")
    p.add_argument("data", help="long-format CSV file")
    p.add_argument("--channel", required=True, help="channel to analyze")
    p.add_argument("--levels", type=int, choices=(2, 3), default=2)
    p.add_argument("--pve", type=float, default=0.99)
    p.add_argument(
        "--smooth",
        nargs="?",
        type=float,
        const=DEFAULT_BANDWIDTH,
        default=None,
        metavar="BANDWIDTH",
        help="smooth level surfaces (optional bandwidth, default 0.05)",
    )
    p.add_argument("--out", required=True, help="fit output directory")
    p.add_argument(
        "--grid-policy", choices=("strict", "intersect"), default="strict"
    )
    p.add_argument(
        "--no-measure-means",
        action="store_true",
        help="skip per-measure mean centering (one-way layout)",
    )
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("icc", help="intraclass correlation of a fit")
    p.add_argument("fit_dir", help="fit directory from `mfda fit`")
    p.set_defaults(handler=cmd_icc)

    p = sub.add_parser("test", help="score-distribution test between groups")
    p.add_argument("fit_dir", help="fit directory from `mfda fit`")
    p.add_argument("--level", type=int, choices=(2,), default=2)
    p.add_argument(
        "--group-a", nargs="+", required=True, metavar="MEASURE"
    )
    p.add_argument(
        "--group-b", nargs="+", required=True, metavar="MEASURE"
    )
    p.add_argument("--method", choices=METHODS, default="energy")
    p.add_argument("--perms", type=int, default=999)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_test)

    p = sub.add_parser(
        "correlate", help="Spearman correlation of scores vs a covariate"
    )
    p.add_argument("fit_dir", help="fit directory from `mfda fit`")
    p.add_argument(
        "--covariate", required=True, help="CSV with columns subject,value"
    )
    p.add_argument("--level", type=int, choices=(1, 2), default=1)
    p.set_defaults(handler=cmd_correlate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except _PRECONDITION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except _NUMERICAL_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
