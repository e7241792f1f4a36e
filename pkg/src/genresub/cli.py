"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import estimators as est
from .core import Dataset, ExperimentScenario, NumericalError, derive_rng, generate_synthetic
from .experiments import (
    DEFAULT_ROSTER,
    RunSettings,
    emit_tables,
    estimate_all,
    load_config,
    run_experiment,
)
from .kernels import (
    EmConfig,
    KernelSet,
    estimate_sigma_chi,
    estimate_sigma_chi_per_class,
    mean_min_distance,
    mpe_em,
    solve_moment_equation,
    xy_augment,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _header(items: dict) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in items.items())


def _read_dataset(path: str) -> Dataset:
    try:
        return Dataset.read_csv(path)
    except OSError as exc:
        raise DataError(f"reading {path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(f"parsing {path}: {exc}") from exc


def _em_config(args) -> EmConfig:
    return EmConfig(args.lam, args.epsilon_c, args.max_iter)


def _add_em_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="lam", type=float, default=1.0, help="E-step regularizer (default 1)")
    p.add_argument("--epsilon-c", type=float, default=1e-6, help="EM convergence threshold (default 1e-6)")
    p.add_argument("--max-iter", type=int, default=500, help="EM iteration cap (default 500)")


def _add_mm_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mm-mc-samples", type=int, default=2000, help="draws for the exact MM expectation")
    p.add_argument("--tolerance", type=float, default=None, help="MM root tolerance (default 1e-4 * mean NN distance)")


def cmd_datagen(args) -> int:
    scenario = ExperimentScenario(args.d, args.pg, 1, args.sigma, args.n)
    text = generate_synthetic(scenario, args.seed).to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_estimate(args) -> int:
    dataset = _read_dataset(args.data)
    roster = [t.strip() for t in args.estimators.split(",") if t.strip()]
    unknown = [t for t in roster if t not in est.ESTIMATOR_TAGS]
    if unknown:
        raise UsageError(f"unknown estimators {unknown}; choose from {', '.join(est.ESTIMATOR_TAGS)}")
    needs_pairs = {est.X_MM_EXACT, est.X_MM_CHI, est.X_MPE, est.XY_MPE, est.MPE_POSTERIOR}
    if dataset.n < 2 and needs_pairs.intersection(roster):
        raise DataError("need at least 2 points for kernel estimation")
    settings = RunSettings(args.mc_samples, args.mm_mc_samples, args.tolerance, _em_config(args))
    results = estimate_all(dataset, args.degree, roster, args.seed, settings)
    out = [_header({"data": args.data, "n": dataset.n, "d": dataset.d, "degree": args.degree, "seed": args.seed,
                    "mc_samples": args.mc_samples, "lambda": args.lam})]
    width = max(len(t) for t in results)
    for tag, e in results.items():
        out.append(f"{tag:<{width}}  {e.value:.10g}  +/- {e.standard_error:.3g}\n")
    sys.stdout.write("".join(out))
    if args.csv:
        rows = ["estimator,value,standard_error,mc_samples\n"]
        rows += [f"{t},{e.value!r},{e.standard_error!r},{e.mc_samples_used}\n" for t, e in results.items()]
        Path(args.csv).write_text("".join(rows))
    return EXIT_OK


def cmd_kernel(args) -> int:
    dataset = _read_dataset(args.data)
    if dataset.n < 2:
        raise DataError("need at least 2 points for kernel estimation")
    eye = np.eye(dataset.d)
    summary: dict[str, object] = {"method": args.method, "n": dataset.n, "d": dataset.d}
    if args.method == "mm-chi":
        if args.label_column:
            labels = _read_labels(args.data, args.label_column)
            kernels = KernelSet.per_class(estimate_sigma_chi_per_class(dataset, labels, eye), eye)
        else:
            kernels = KernelSet.shared(estimate_sigma_chi(dataset, eye), eye)
            summary["mean_nn_distance"] = repr(mean_min_distance(dataset, eye))
    elif args.method == "mm-exact":
        sol = solve_moment_equation(dataset, eye, args.mm_mc_samples, args.tolerance, derive_rng(args.seed, "kernel-mm-exact"))
        kernels = KernelSet.shared(sol.sigma, eye)
        summary.update(mean_nn_distance=repr(sol.target), expected=repr(sol.expected),
                       standard_error=repr(sol.standard_error), bracket=sol.bracket, bisections=sol.iterations)
    else:
        points = dataset.features if args.method == "mpe" else xy_augment(dataset)
        res = mpe_em(points, _em_config(args))
        kernels = res.kernels
        traces = np.trace(kernels.matrices, axis1=1, axis2=2)
        eig = np.linalg.eigvalsh(kernels.matrices)
        summary.update(lam=args.lam, iterations=res.iterations, converged=str(res.converged).lower(),
                       trace_min=repr(float(traces.min())), trace_max=repr(float(traces.max())),
                       eigenvalue_min=repr(float(eig.min())), eigenvalue_max=repr(float(eig.max())))
    if kernels.kind != "per-point":
        for label, s in sorted(kernels.scales.items()):
            summary[f"scale[{label}]"] = repr(s)
    text = _header(summary) + kernels.to_text()
    if args.out:
        Path(args.out).write_text(kernels.to_text())
        sys.stdout.write(_header(summary))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _read_labels(path: str, column: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or column not in rows[0]:
        raise DataError(f"label column {column!r} not found in {path}")
    try:
        return np.array([int(float(r[column])) for r in rows])
    except ValueError as exc:
        raise DataError(f"label column {column!r} is not integer: {exc}") from exc


def cmd_experiment(args) -> int:
    try:
        config = load_config(args.config)
    except OSError as exc:
        raise DataError(f"reading config {args.config}: {exc}") from exc
    if args.csv:
        config.csv_path = args.csv
    if args.markdown:
        config.markdown_path = args.markdown
    sys.stdout.write(_header({
        "config": args.config, "seed": config.seed, "replicates": config.replicates,
        "mc_samples": config.settings.mc_samples, "mc_true_error": config.mc_true_error,
        "mm_mc_samples": config.settings.mm_mc_samples, "lambda": config.settings.em.lam,
        "estimators": ",".join(config.estimators), "scenarios": len(config.scenarios()),
    }))

    def progress(msg: str) -> None:
        print(msg, file=sys.stderr, flush=True)

    outcome = run_experiment(config, threads=args.threads, progress=progress)
    csv_text = emit_tables(outcome.summaries, "csv")
    md_text = emit_tables(outcome.summaries, "markdown")
    if config.csv_path:
        Path(config.csv_path).write_text(csv_text)
    if config.markdown_path:
        Path(config.markdown_path).write_text(md_text)
    if not config.csv_path and not config.markdown_path:
        sys.stdout.write(csv_text)
    else:
        sys.stdout.write(md_text)
    for sid in outcome.failed_scenarios:
        print(f"scenario {sid}: every replicate failed", file=sys.stderr)
    if outcome.failed_scenarios and not outcome.summaries:
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="genresub", description="Generalized resubstitution error estimation for regression.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("datagen", help="write a synthetic polynomial dataset as CSV")
    p.add_argument("--d", type=int, default=1)
    p.add_argument("--pg", type=int, default=1, help="generating polynomial degree")
    p.add_argument("--sigma", type=float, default=0.25)
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output CSV path (default stdout)")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("estimate", help="error estimates for a polynomial fit of a CSV dataset")
    p.add_argument("--data", required=True, help="CSV with columns x1..xd,y")
    p.add_argument("--degree", type=int, required=True)
    p.add_argument("--estimators", default=",".join(DEFAULT_ROSTER),
                   help=f"comma-separated subset of {', '.join(est.ESTIMATOR_TAGS)}")
    p.add_argument("--mc-samples", type=int, default=1000, help="bolstering draws per point (default 1000)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv", help="also write results to this CSV")
    _add_em_flags(p)
    _add_mm_flags(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("kernel", help="estimate bolstering kernels and print them")
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["mm-exact", "mm-chi", "mpe", "mpe-xy"], required=True)
    p.add_argument("--label-column", help="integer class column for per-class mm-chi scales")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the kernel set here instead of stdout")
    _add_em_flags(p)
    _add_mm_flags(p)
    p.set_defaults(func=cmd_kernel)

    p = sub.add_parser("experiment", help="run a replicated scenario grid from a YAML config")
    p.add_argument("--config", required=True)
    p.add_argument("--threads", type=int, default=1, help="worker processes; output is identical for any value")
    p.add_argument("--csv", help="override the results CSV path")
    p.add_argument("--markdown", help="override the markdown tables path")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "label_column", None) and args.method != "mm-chi":
        parser.error("--label-column is only meaningful with --method mm-chi")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"genresub {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"genresub {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"genresub {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"genresub {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
