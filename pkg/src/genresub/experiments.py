"""Replicated polynomial-regression study: bias and RMSE of each error estimator."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from . import estimators as est
from .core import (
    Dataset,
    ExperimentScenario,
    NumericalError,
    derive_rng,
    generate_synthetic,
    num_polynomial_terms,
)
from .kernels import EmConfig, KernelSet, estimate_sigma_chi, mpe_em, solve_moment_equation, xy_augment
from .regression import NormalInverseGammaPrior, fit_bayesian, fit_least_squares

log = logging.getLogger(__name__)

DEFAULT_ROSTER = (est.RESUB, est.POSTERIOR, est.X_MPE, est.XY_MPE, est.X_MM_EXACT, est.MPE_POSTERIOR)

# Table column headings.
COLUMN_LABELS = {
    est.RESUB: "Resub",
    est.POSTERIOR: "Post",
    est.X_MPE: "X - MPE",
    est.XY_MPE: "XY - MPE",
    est.X_MM_EXACT: "X - MM",
    est.X_MM_CHI: "X - MM chi",
    est.MPE_POSTERIOR: "MPE - Post",
}

RESULTS_HEADER = ["d", "sigma", "n", "pg", "pf", "estimator", "bias", "rmse", "replicates", "failures"]


@dataclass(frozen=True)
class RunSettings:
    """Monte Carlo sizes and solver parameters shared by every replicate."""

    mc_samples: int = 1000
    mm_mc_samples: int = 2000
    mm_tolerance: float | None = None
    em: EmConfig = field(default_factory=EmConfig)
    prior: NormalInverseGammaPrior = field(default_factory=NormalInverseGammaPrior)


@dataclass
class ReplicateRecord:
    scenario_id: str
    replicate: int
    seed: int
    true_error: float = float("nan")
    estimates: dict[str, est.ErrorEstimate] = field(default_factory=dict)
    wall_time: dict[str, float] = field(default_factory=dict)
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure is None


@dataclass
class ScenarioSummary:
    d: int
    sigma: float
    n: int
    p_g: int
    p_f: int
    bias: dict[str, float]
    rmse: dict[str, float]
    replicates: int
    failures: int = 0

    @property
    def key(self) -> tuple:
        return (self.d, self.sigma, self.n, self.p_g, self.p_f)


def replicate_seed(master_seed: int, scenario: ExperimentScenario, replicate: int) -> int:
    """64-bit seed for one replicate's data.

    Keyed by (d, p_g, sigma, n, replicate) but not p_f, so the two fitted
    degrees of a design point see the same samples.
    """
    sigma_key = int(round(scenario.sigma * 1_000_000))
    ss = np.random.SeedSequence(master_seed, spawn_key=(scenario.d, scenario.p_g, sigma_key, scenario.n, replicate))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def _stream(seed: int, tag: str) -> np.random.Generator:
    return derive_rng(seed, tag)


def estimate_all(dataset: Dataset, degree: int, roster: Sequence[str], seed: int,
                 settings: RunSettings = RunSettings(),
                 timings: dict[str, float] | None = None) -> dict[str, est.ErrorEstimate]:
    """Fit ``degree`` polynomial and evaluate every estimator in ``roster``.

    Each stochastic step draws from its own stream derived from ``seed`` and
    a fixed tag, so the roster's order and membership do not change results.
    """
    timings = timings if timings is not None else {}
    unknown = set(roster) - set(est.ESTIMATOR_TAGS)
    if unknown:
        raise ValueError(f"unknown estimators: {sorted(unknown)}")
    model = fit_least_squares(dataset, degree)
    eye = np.eye(dataset.d)
    out: dict[str, est.ErrorEstimate] = {}
    cache: dict[str, object] = {}

    def posterior():
        if "posterior" not in cache:
            cache["posterior"] = fit_bayesian(dataset, degree, settings.prior)
        return cache["posterior"]

    def x_mpe() -> KernelSet:
        if "x-mpe" not in cache:
            cache["x-mpe"] = mpe_em(dataset.features, settings.em).kernels
        return cache["x-mpe"]

    for tag in roster:
        t0 = time.perf_counter()
        rng = _stream(seed, tag)
        if tag == est.RESUB:
            out[tag] = est.resubstitution(model, dataset)
        elif tag == est.POSTERIOR:
            out[tag] = est.posterior_probability(model, dataset, posterior())
        elif tag == est.X_MPE:
            out[tag] = est.bolstered_x(model, dataset, x_mpe(), settings.mc_samples, rng, tag=tag)
        elif tag == est.XY_MPE:
            kernels = mpe_em(xy_augment(dataset), settings.em).kernels
            out[tag] = est.bolstered_xy(model, dataset, kernels, settings.mc_samples, rng, tag=tag)
        elif tag == est.X_MM_CHI:
            kernels = KernelSet.shared(estimate_sigma_chi(dataset, eye), eye)
            out[tag] = est.bolstered_x(model, dataset, kernels, settings.mc_samples, rng, tag=tag)
        elif tag == est.X_MM_EXACT:
            sol = solve_moment_equation(dataset, eye, settings.mm_mc_samples, settings.mm_tolerance,
                                        _stream(seed, "kernel-mm-exact"))
            kernels = KernelSet.shared(sol.sigma, eye)
            out[tag] = est.bolstered_x(model, dataset, kernels, settings.mc_samples, rng, tag=tag)
        elif tag == est.MPE_POSTERIOR:
            out[tag] = est.bolstered_posterior(model, dataset, x_mpe(), posterior(), settings.mc_samples, rng)
        timings[tag] = time.perf_counter() - t0
    return out


def run_replicate(scenario: ExperimentScenario, roster: Sequence[str], master_seed: int, replicate: int,
                  settings: RunSettings = RunSettings()) -> ReplicateRecord:
    seed = replicate_seed(master_seed, scenario, replicate)
    record = ReplicateRecord(scenario.id, replicate, seed)
    try:
        dataset = generate_synthetic(scenario, seed)
        record.estimates = estimate_all(dataset, scenario.p_f, roster, seed, settings, record.wall_time)
        t0 = time.perf_counter()
        model = fit_least_squares(dataset, scenario.p_f)
        truth = est.true_error_mc(model, scenario, scenario.mc_true_error, _stream(seed, est.TRUE_MC))
        record.wall_time[est.TRUE_MC] = time.perf_counter() - t0
        record.estimates[est.TRUE_MC] = truth
        record.true_error = truth.value
        values = [e.value for e in record.estimates.values()]
        if not np.all(np.isfinite(values)):
            raise NumericalError("non-finite estimate")
    except (NumericalError, ValueError, np.linalg.LinAlgError) as exc:
        record.failure = f"{type(exc).__name__}: {exc}"
        log.warning("scenario %s replicate %d failed: %s", scenario.id, replicate, record.failure)
    return record


def _run_replicate_args(args) -> ReplicateRecord:
    return run_replicate(*args)


def run_scenario(scenario: ExperimentScenario, roster: Sequence[str], master_seed: int,
                 settings: RunSettings = RunSettings(), threads: int = 1,
                 replicate_offset: int = 0) -> list[ReplicateRecord]:
    """All replicates of one scenario, ordered by replicate index.

    ``threads > 1`` runs replicates in worker processes; every replicate owns
    its streams, so the records do not depend on the schedule.
    """
    if not roster:
        raise ValueError("estimator roster is empty")
    jobs = [(scenario, tuple(roster), master_seed, r, settings)
            for r in range(replicate_offset, replicate_offset + scenario.replicates)]
    if threads <= 1:
        return [run_replicate(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        records = list(pool.map(_run_replicate_args, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    return sorted(records, key=lambda r: r.replicate)


def aggregate(records: Iterable[ReplicateRecord], scenario: ExperimentScenario | None = None) -> ScenarioSummary:
    """Bias and RMSE of each estimator against each replicate's own true error."""
    records = list(records)
    good = [r for r in records if r.ok]
    if not good:
        raise ValueError("no successful replicates to aggregate")
    tags = [t for t in good[0].estimates if t != est.TRUE_MC]
    bias, rmse = {}, {}
    for tag in tags:
        dev = np.array([r.estimates[tag].value - r.true_error for r in good])
        bias[tag] = float(dev.mean())
        # sqrt(mean(dev^2)) >= |mean(dev)| holds exactly; guard against rounding
        rmse[tag] = max(float(np.sqrt(np.mean(dev**2))), abs(bias[tag]))
    if scenario is None:
        scenario = _parse_scenario_id(good[0].scenario_id)
    return ScenarioSummary(scenario.d, scenario.sigma, scenario.n, scenario.p_g, scenario.p_f, bias, rmse,
                           len(good), len(records) - len(good))


_ID_RE = re.compile(r"d(?P<d>\d+)_s(?P<s>[^_]+)_n(?P<n>\d+)_pg(?P<pg>\d+)_pf(?P<pf>\d+)")


def _parse_scenario_id(sid: str) -> ExperimentScenario:
    m = _ID_RE.fullmatch(sid)
    if m is None:
        raise ValueError(f"malformed scenario id {sid!r}")
    return ExperimentScenario(int(m["d"]), int(m["pg"]), int(m["pf"]), float(m["s"]), int(m["n"]))


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


def format_sig(value: float, digits: int = 2) -> str:
    """Positional notation with ``digits`` significant figures (e.g. -0.0035, 0.00054, 20)."""
    return np.format_float_positional(value, precision=digits, unique=False, fractional=False, trim="-")


def summaries_to_csv(summaries: Sequence[ScenarioSummary]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULTS_HEADER)
    for s in summaries:
        for tag in s.bias:
            writer.writerow([s.d, repr(float(s.sigma)), s.n, s.p_g, s.p_f, tag, repr(s.bias[tag]), repr(s.rmse[tag]),
                             s.replicates, s.failures])
    return buf.getvalue()


def summaries_from_csv(text: str) -> list[ScenarioSummary]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != RESULTS_HEADER:
        raise ValueError(f"unexpected results header {reader.fieldnames}")
    out: dict[tuple, ScenarioSummary] = {}
    for row in reader:
        key = (int(row["d"]), float(row["sigma"]), int(row["n"]), int(row["pg"]), int(row["pf"]))
        if key not in out:
            out[key] = ScenarioSummary(*key, bias={}, rmse={}, replicates=int(row["replicates"]),
                                       failures=int(row["failures"]))
        out[key].bias[row["estimator"]] = float(row["bias"])
        out[key].rmse[row["estimator"]] = float(row["rmse"])
    return list(out.values())


def _markdown_table(summaries: Sequence[ScenarioSummary], metric: str, tags: Sequence[str]) -> str:
    head = ["d", "σ", "n", "p_g", "p_f"] + [COLUMN_LABELS.get(t, t) for t in tags]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for s in summaries:
        values = getattr(s, metric)
        cells = [str(s.d), f"{s.sigma:.2f}", str(s.n), str(s.p_g), str(s.p_f)]
        cells += [format_sig(values[t]) if t in values else "" for t in tags]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def emit_tables(summaries: Sequence[ScenarioSummary], fmt: str = "markdown") -> str:
    """Render summaries as the long-format results CSV or as bias/RMSE markdown tables."""
    if fmt == "csv":
        return summaries_to_csv(summaries)
    if fmt != "markdown":
        raise ValueError(f"unknown table format {fmt!r}")
    tags: list[str] = []
    for s in summaries:
        tags.extend(t for t in s.bias if t not in tags)
    ordered = [t for t in DEFAULT_ROSTER + (est.X_MM_CHI,) if t in tags] + [t for t in tags if t not in COLUMN_LABELS]
    return (
        "### Bias\n\n" + _markdown_table(summaries, "bias", ordered)
        + "\n### RMSE\n\n" + _markdown_table(summaries, "rmse", ordered)
    )


# ---------------------------------------------------------------------------
# Config-driven grids
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    d: list[int]
    sigma: list[float]
    n: list[int]
    p_g: list[int]
    p_f: list[int]
    estimators: list[str] = field(default_factory=lambda: list(DEFAULT_ROSTER))
    seed: int = 0
    replicates: int = 100
    mc_true_error: int = 1000
    settings: RunSettings = field(default_factory=RunSettings)
    csv_path: str | None = None
    markdown_path: str | None = None

    def scenarios(self) -> list[ExperimentScenario]:
        """Grid in table order: d, sigma, n, p_g, p_f. Ill-posed fits are skipped."""
        out = []
        for d, sigma, n, pg, pf in itertools.product(self.d, self.sigma, self.n, self.p_g, self.p_f):
            if n <= num_polynomial_terms(d, pf):
                log.warning("skipping d=%d n=%d p_f=%d: too few points for the fit", d, n, pf)
                continue
            out.append(ExperimentScenario(d, pg, pf, float(sigma), n, self.mc_true_error, self.replicates))
        return out


def _as_list(value) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text()) or {}
    grid = raw.get("grid", {})
    missing = [k for k in ("d", "sigma", "n", "p_g", "p_f") if k not in grid]
    if missing:
        raise ValueError(f"config grid is missing {missing}")
    em_raw = raw.get("em", {})
    prior_raw = raw.get("prior", {})
    settings = RunSettings(
        mc_samples=int(raw.get("mc_samples", 1000)),
        mm_mc_samples=int(raw.get("mm_mc_samples", 2000)),
        mm_tolerance=raw.get("mm_tolerance"),
        em=EmConfig(float(em_raw.get("lambda", 1.0)), float(em_raw.get("epsilon_c", 1e-6)),
                    int(em_raw.get("max_iterations", 500))),
        prior=NormalInverseGammaPrior(**{k: float(v) for k, v in prior_raw.items()}),
    )
    out = raw.get("output", {})

    estimators = _as_list(raw.get("estimators", list(DEFAULT_ROSTER)))
    unknown = set(estimators) - set(est.ESTIMATOR_TAGS)
    if unknown:
        raise ValueError(f"unknown estimators in config: {sorted(unknown)}")
    return ExperimentConfig(
        d=[int(v) for v in _as_list(grid["d"])],
        sigma=[float(v) for v in _as_list(grid["sigma"])],
        n=[int(v) for v in _as_list(grid["n"])],
        p_g=[int(v) for v in _as_list(grid["p_g"])],
        p_f=[int(v) for v in _as_list(grid["p_f"])],
        estimators=estimators,
        seed=int(raw.get("seed", 0)),
        replicates=int(raw.get("replicates", 100)),
        mc_true_error=int(raw.get("mc_true_error", 1000)),
        settings=settings,
        csv_path=out.get("csv"),
        markdown_path=out.get("markdown"),
    )


@dataclass
class ExperimentOutcome:
    summaries: list[ScenarioSummary]
    failed_scenarios: list[str]


def run_experiment(config: ExperimentConfig, threads: int = 1,
                   progress: Callable[[str], None] | None = None) -> ExperimentOutcome:
    summaries, failed = [], []
    for scenario in config.scenarios():
        t0 = time.perf_counter()
        records = run_scenario(scenario, config.estimators, config.seed, config.settings, threads)
        try:
            summary = aggregate(records, scenario)
        except ValueError:
            failed.append(scenario.id)
            if progress:
                progress(f"{scenario.id}: all {len(records)} replicates failed")
            continue
        summaries.append(summary)
        if progress:
            progress(f"{scenario.id}: {summary.replicates} ok, {summary.failures} failed "
                     f"({time.perf_counter() - t0:.1f}s)")
    return ExperimentOutcome(summaries, failed)
