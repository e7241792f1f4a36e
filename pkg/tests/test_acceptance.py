"""Acceptance criteria, one test each, at the tolerances the criteria state.

Each test prints a single ``ACCEPTANCE <k> PASS|FAIL: ...`` line to the
terminal (captured output is bypassed) before asserting, so
``pytest tests/test_acceptance.py`` doubles as a report.
"""

import math

import numpy as np
import pytest

from genresub import experiments as ex
from genresub.cli import main as cli_main
from genresub.core import Dataset, ExperimentScenario, derive_rng, generate_synthetic, mean_min_distance
from genresub.estimators import (
    bolstered_posterior,
    bolstered_x,
    bolstered_x_linear_closed_form,
    bolstered_xy,
    posterior_probability,
    resubstitution,
    true_error_mc,
)
from genresub.kernels import (
    EmConfig,
    KernelSet,
    chi_mean,
    em_weights,
    estimate_sigma_chi,
    expected_min_distance,
    mpe_em,
    solve_moment_equation,
)
from genresub.regression import PolynomialModel, fit_bayesian, fit_least_squares

SEED = 20240101


@pytest.fixture
def report(capsys):
    def emit(k, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {k} {'PASS' if ok else 'FAIL'}: {detail}")
    return emit


def _brute_closed_form(x):
    n = x.shape[0]
    diff = x[None, :, :] - x[:, None, :]
    return np.einsum("ija,ijb->iab", diff, diff) / (n - 1) ** 2


def test_1_chi_means(report):
    reported = [0.79, 1.25, 1.59, 1.88, 2.12]
    got = [chi_mean(d) for d in range(1, 6)]
    # the reported figures truncate some values and round others, so agreement is to one unit in the last place
    ok = all(abs(g - r) < 0.01 for g, r in zip(got, reported))
    report(1, ok, "chi means " + ", ".join(f"{g:.4f}" for g in got) + f" vs reported {reported}")
    assert ok


def test_2_em_algebra(report):
    rng = np.random.default_rng(SEED + 2)
    worst = 0.0
    for _ in range(200):
        n, k = int(rng.integers(2, 51)), int(rng.integers(1, 5))
        lam = float(rng.choice([0.01, 1.0, 100.0]))
        a = rng.normal(size=(n, k, k))
        kern = a @ np.swapaxes(a, 1, 2) * rng.uniform(0.01, 1.0) + 1e-3 * np.eye(k)
        w = em_weights(rng.normal(size=(n, k)), kern, lam)
        worst = max(worst, float(np.abs(w.sum(axis=0) - 1.0).max()))
    x = rng.uniform(size=(30, 2))
    res = mpe_em(x, EmConfig(lam=1e12))
    gap = float(np.abs(res.kernels.matrices - _brute_closed_form(x)).max())
    ok = worst <= 1e-10 and gap <= 1e-8
    report(2, ok, f"max |column sum - 1| = {worst:.2e} over 200 instances; large-lambda gap = {gap:.2e}")
    assert ok


def test_3_degeneracy(report):
    rng = np.random.default_rng(SEED + 3)
    mismatches = 0
    for i in range(50):
        d = int(rng.integers(1, 4))
        pf = int(rng.integers(1, 3))
        sc = ExperimentScenario(d, int(rng.integers(1, 4)), pf, float(rng.choice([0.25, 0.5])), 30)
        ds = generate_synthetic(sc, int(rng.integers(2**31)))
        model, post = fit_least_squares(ds, pf), fit_bayesian(ds, pf)
        stream = derive_rng(SEED, i)
        resub = resubstitution(model, ds).value
        mismatches += bolstered_x(model, ds, KernelSet.zeros(ds.n, d), 100, stream).value != resub
        mismatches += bolstered_xy(model, ds, KernelSet.zeros(ds.n, d + 1), 100, stream).value != resub
        mismatches += (bolstered_posterior(model, ds, KernelSet.zeros(ds.n, d), post, 100, stream).value
                       != posterior_probability(model, ds, post).value)
    report(3, mismatches == 0, f"{mismatches} inexact matches in 150 zero-kernel comparisons")
    assert mismatches == 0


def test_4_oracle_equivalence(report):
    rng = np.random.default_rng(SEED + 4)
    x_miss = xy_miss = 0
    worst = 0.0
    for i in range(100):
        d = 1 + i % 3
        n = int(rng.integers(5, 30))
        ds = Dataset(rng.uniform(size=(n, d)), rng.normal(size=n))
        model = PolynomialModel(d, 1, rng.normal(size=d + 1))
        a = rng.normal(size=(d, d))
        ks = KernelSet.shared(rng.uniform(0.05, 0.5), a @ a.T + 0.1 * np.eye(d))
        mc = bolstered_x(model, ds, ks, 1000, rng)
        z = abs(mc.value - bolstered_x_linear_closed_form(model, ds, ks).value) / mc.standard_error
        x_miss += z > 3
        worst = max(worst, z)

        b = rng.normal(size=(n, d + 1, d + 1))
        joint = 0.05 * b @ np.swapaxes(b, 1, 2)
        mc = bolstered_xy(model, ds, KernelSet.per_point(joint), 1000, rng)
        w = np.append(model.coefficients[1:], -1.0)
        exact = np.mean((model(ds.features) - ds.targets) ** 2 + np.einsum("k,ikl,l->i", w, joint, w))
        z = abs(mc.value - exact) / mc.standard_error
        xy_miss += z > 3
        worst = max(worst, z)
    ok = x_miss == 0 and xy_miss == 0
    # a calibrated estimator lands outside 3 SE with probability 0.0027 per comparison
    report(4, ok, f"outside 3 SE: X {x_miss}/100, XY {xy_miss}/100 (largest |z| = {worst:.2f}; "
                  f"chance alone gives {200 * 0.0027:.2f} expected misses)")
    assert ok


def test_5_moment_ordering_and_fixed_point(report):
    rng = np.random.default_rng(SEED + 5)
    above_chi = fixed_point_miss = 0
    ratios = []
    for i in range(50):
        d, n = int(rng.integers(1, 4)), int(rng.integers(5, 51))
        ds = Dataset(rng.uniform(size=(n, d)), np.zeros(n))
        eye = np.eye(d)
        sol = solve_moment_equation(ds, eye, 2000, rng=derive_rng(SEED, "mm", i))
        tol = 1e-4 * sol.target
        chi = estimate_sigma_chi(ds, eye)
        ratios.append(sol.sigma / chi)
        above_chi += sol.sigma > chi + tol
        # plug the root back into the same Monte Carlo integral that defines it
        value, se = expected_min_distance(ds, sol.sigma, eye, 2000, derive_rng(SEED, "mm", i))
        fixed_point_miss += abs(value - mean_min_distance(ds, eye)) > max(tol, 3 * se)
    ok = above_chi == 0 and fixed_point_miss == 0
    report(5, ok, f"fixed point missed on {fixed_point_miss}/50; exact > chi + tol on {above_chi}/50 "
                  f"(exact/chi ratio {min(ratios):.3f}..{max(ratios):.3f}); the chi value bounds the root "
                  "from below since E[delta] <= sigma E[chi], so the stated ordering cannot hold")
    assert fixed_point_miss == 0
    assert above_chi == 0


def test_6_chi_limit_inequality(report):
    rng = np.random.default_rng(SEED + 6)
    violations = 0
    worst = -math.inf
    for i in range(20):
        d, n = int(rng.integers(1, 4)), int(rng.integers(5, 41))
        ds = Dataset(rng.uniform(size=(n, d)), np.zeros(n))
        eye = np.eye(d)
        delta = mean_min_distance(ds, eye)
        for c in (0.01, 0.1, 1.0):
            sigma = c * delta
            value, se = expected_min_distance(ds, sigma, eye, 2000, derive_rng(SEED, "chi", i, int(c * 100)))
            slack = value / sigma - chi_mean(d) - 3 * se / sigma
            violations += slack > 0
            worst = max(worst, slack)
    report(6, violations == 0, f"{violations}/60 violations; largest ratio - (chi mean + 3 SE) = {worst:.3g}")
    assert violations == 0


def test_7_table_replication(report):
    sc = ExperimentScenario(1, 1, 1, 0.25, 100, replicates=100)
    roster = ["resub", "posterior", "x-gauss-mpe", "xy-gauss-mpe"]
    s = ex.aggregate(ex.run_scenario(sc, roster, SEED))
    b, r = s.bias, s.rmse
    checks = {
        "resub bias in -0.0035 +/- 0.0035": abs(b["resub"] + 0.0035) <= 0.0035,
        "resub rmse in [0.005, 0.013]": 0.005 <= r["resub"] <= 0.013,
        "|X-MPE bias| < |resub bias| + 0.002": abs(b["x-gauss-mpe"]) < abs(b["resub"]) + 0.002,
        "|XY-MPE bias| < |resub bias| + 0.002": abs(b["xy-gauss-mpe"]) < abs(b["resub"]) + 0.002,
        "posterior bias > -0.005": b["posterior"] > -0.005,
    }
    ok = all(checks.values())
    detail = ", ".join(f"{t} bias {b[t]:+.4f} rmse {r[t]:.4f}" for t in roster)
    failed = [k for k, v in checks.items() if not v]
    report(7, ok, detail + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


def test_8_overfitting_direction(report):
    sc = ExperimentScenario(1, 3, 2, 0.5, 20, replicates=100)
    roster = ["resub", "x-gauss-mpe", "xy-gauss-mpe", "x-gauss-mm-exact"]
    runs = [ex.aggregate(ex.run_scenario(sc, roster, SEED + 100 * k)) for k in range(10)]
    resub = np.array([s.bias["resub"] for s in runs])
    pooled = float(resub.mean())
    wins = sum(any(abs(s.bias[t]) < abs(s.bias["resub"]) for t in roster[1:]) for s in runs)
    ok = pooled < 0 and abs(pooled) >= 0.02 and wins >= 6
    report(8, ok, f"resub bias pooled {pooled:+.4f} (per run {resub.min():+.4f}..{resub.max():+.4f}); "
                  f"a bolstered estimator beat resub in {wins}/10 meta-runs")
    assert ok


def test_9_consistency(report):
    medians = {}
    for n in (20, 200):
        sc = ExperimentScenario(1, 1, 1, 0.25, n)
        dev = {"resub": [], "x-gauss-mpe": []}
        for rep in range(50):
            seed = ex.replicate_seed(SEED, sc, rep)
            ds = generate_synthetic(sc, seed)
            model = fit_least_squares(ds, 1)
            truth = true_error_mc(model, sc, 1000, derive_rng(seed, "true-mc")).value
            dev["resub"].append(abs(resubstitution(model, ds).value - truth))
            ks = mpe_em(ds.features).kernels
            dev["x-gauss-mpe"].append(abs(bolstered_x(model, ds, ks, 1000, derive_rng(seed, "x-gauss-mpe")).value - truth))
        medians[n] = {t: float(np.median(v)) for t, v in dev.items()}
    ok = all(medians[200][t] < medians[20][t] for t in medians[20])
    report(9, ok, "median |estimate - true| n=20 -> n=200: " + ", ".join(
        f"{t} {medians[20][t]:.4f} -> {medians[200][t]:.4f}" for t in medians[20]))
    assert ok


def test_10_determinism(report, repo_root, tmp_path, capsys):
    cfg = (repo_root / "configs" / "study_d1.yaml").read_text().replace("replicates: 100", "replicates: 4")
    path = tmp_path / "det.yaml"
    path.write_text(cfg)
    outputs = []
    for i, threads in enumerate((1, 1, 8)):
        csv_path = tmp_path / f"run{i}.csv"
        code = cli_main(["experiment", "--config", str(path), "--threads", str(threads),
                         "--csv", str(csv_path), "--markdown", str(tmp_path / f"run{i}.md")])
        assert code == 0
        outputs.append(csv_path.read_bytes())
    capsys.readouterr()
    ok = outputs[0] == outputs[1] == outputs[2]
    rows = outputs[0].decode().count("\n") - 1
    report(10, ok, f"{rows} result rows; rerun identical: {outputs[0] == outputs[1]}; "
                   f"threads 1 vs 8 identical: {outputs[0] == outputs[2]}")
    assert ok
