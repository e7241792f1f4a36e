"""Generalized resubstitution error estimators for squared-error regression.

Every stochastic estimator integrates by Monte Carlo, one block of draws per
observation, and reports the standard error of its estimate. Observations
whose kernel is exactly zero are evaluated at the data point itself and
consume no draws, so a zero kernel set reproduces the unsmoothed estimator
bit for bit.

Row-permutation invariance holds within Monte Carlo error only: draws are
taken from the stream in row order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .core import Dataset, ExperimentScenario, psd_sqrt
from .kernels import KernelSet
from .regression import BayesianPosterior, PolynomialModel, posterior_predictive_many, predict_many

RESUB = "resub"
X_MM_EXACT = "x-gauss-mm-exact"
X_MM_CHI = "x-gauss-mm-chi"
X_MPE = "x-gauss-mpe"
XY_MPE = "xy-gauss-mpe"
POSTERIOR = "posterior"
MPE_POSTERIOR = "mpe-posterior"
TRUE_MC = "true-mc"

ESTIMATOR_TAGS = (RESUB, X_MM_EXACT, X_MM_CHI, X_MPE, XY_MPE, POSTERIOR, MPE_POSTERIOR)
ALL_TAGS = ESTIMATOR_TAGS + (TRUE_MC,)


@dataclass(frozen=True)
class ErrorEstimate:
    value: float
    standard_error: float
    estimator_tag: str
    mc_samples_used: int = 0

    def __str__(self) -> str:
        return f"{self.estimator_tag}: {self.value:.6g} +/- {self.standard_error:.2g}"


def _combine(contrib: NDArray, sq_se: NDArray, tag: str, draws: int) -> ErrorEstimate:
    n = contrib.shape[0]
    se = float(np.sqrt(sq_se.sum()) / n) if draws else 0.0
    return ErrorEstimate(float(contrib.mean()), se, tag, draws)


def _check_dims(model: PolynomialModel, dataset: Dataset) -> None:
    if model.d != dataset.d:
        raise ValueError(f"model expects d={model.d} but dataset has d={dataset.d}")


def resubstitution(model: PolynomialModel, dataset: Dataset) -> ErrorEstimate:
    _check_dims(model, dataset)
    loss = (predict_many(model, dataset.features) - dataset.targets) ** 2
    return ErrorEstimate(float(loss.mean()), 0.0, RESUB, 0)


def _smooth(kernels: NDArray, mc_samples: int, rng: np.random.Generator, centers: NDArray,
            point_loss, base_loss: NDArray) -> tuple[NDArray, NDArray, int]:
    """Per-observation MC averages of ``point_loss(i, draws)`` over N(centers[i], kernels[i]).

    Observations with an all-zero kernel keep ``base_loss[i]`` and no draws.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    n, k = centers.shape
    if kernels.shape != (n, k, k):
        raise ValueError(f"kernels must have shape ({n}, {k}, {k}), got {kernels.shape}")
    contrib = np.array(base_loss, dtype=np.float64, copy=True)
    sq_se = np.zeros(n)
    draws = 0
    for i in range(n):
        if not np.any(kernels[i]):
            continue
        factor = psd_sqrt(kernels[i])
        sample = centers[i] + rng.standard_normal((mc_samples, k)) @ factor.T
        loss = point_loss(i, sample)
        contrib[i] = loss.mean()
        sq_se[i] = loss.var(ddof=1) / mc_samples if mc_samples > 1 else 0.0
        draws += mc_samples
    return contrib, sq_se, draws


def bolstered_x(model: PolynomialModel, dataset: Dataset, kernels: KernelSet, mc_samples: int = 1000,
                rng: np.random.Generator | None = None, labels: ArrayLike | None = None,
                tag: str = X_MPE) -> ErrorEstimate:
    """Gaussian bolstering in the feature direction, targets held at the data."""
    _check_dims(model, dataset)
    rng = rng if rng is not None else np.random.default_rng(0)
    mats = kernels.realize(dataset.n, labels)
    if mats.shape[1] != dataset.d:
        raise ValueError(f"X-kernels must be {dataset.d}x{dataset.d}")
    y = dataset.targets
    base = (predict_many(model, dataset.features) - y) ** 2
    contrib, sq_se, draws = _smooth(
        mats, mc_samples, rng, dataset.features,
        lambda i, x: (predict_many(model, x) - y[i]) ** 2, base,
    )
    return _combine(contrib, sq_se, tag, draws)


def bolstered_x_linear_closed_form(model: PolynomialModel, dataset: Dataset, kernels: KernelSet,
                                   labels: ArrayLike | None = None) -> ErrorEstimate:
    """Exact X-bolstered error of an affine predictor: resubstitution plus ``a^T K_i a``."""
    if model.degree != 1:
        raise ValueError(f"closed form needs a degree-1 model, got degree {model.degree}")
    _check_dims(model, dataset)
    mats = kernels.realize(dataset.n, labels)
    slope = model.coefficients[1:]
    resid = predict_many(model, dataset.features) - dataset.targets
    value = np.mean(resid**2 + np.einsum("k,ikl,l->i", slope, mats, slope))
    return ErrorEstimate(float(value), 0.0, "x-gauss-linear-exact", 0)


def bolstered_xy(model: PolynomialModel, dataset: Dataset, joint_kernels: KernelSet, mc_samples: int = 1000,
                 rng: np.random.Generator | None = None, tag: str = XY_MPE) -> ErrorEstimate:
    """Joint Gaussian bolstering of ``(x, y)`` around each observation."""
    _check_dims(model, dataset)
    rng = rng if rng is not None else np.random.default_rng(0)
    mats = joint_kernels.realize(dataset.n)
    if mats.shape[1] != dataset.d + 1:
        raise ValueError(f"XY-kernels must be {dataset.d + 1}x{dataset.d + 1}")
    centers = np.column_stack([dataset.features, dataset.targets])
    base = (predict_many(model, dataset.features) - dataset.targets) ** 2
    contrib, sq_se, draws = _smooth(
        mats, mc_samples, rng, centers,
        lambda i, xy: (predict_many(model, xy[:, :-1]) - xy[:, -1]) ** 2, base,
    )
    return _combine(contrib, sq_se, tag, draws)


def _posterior_loss(model: PolynomialModel, posterior: BayesianPosterior, x: NDArray) -> NDArray:
    # E[(psi(x) - Y)^2] under the predictive law = var + (mean - psi(x))^2
    mean, var = posterior_predictive_many(posterior, x)
    return var + (mean - predict_many(model, x)) ** 2


def posterior_probability(model: PolynomialModel, dataset: Dataset, posterior: BayesianPosterior) -> ErrorEstimate:
    _check_dims(model, dataset)
    loss = _posterior_loss(model, posterior, dataset.features)
    return ErrorEstimate(float(loss.mean()), 0.0, POSTERIOR, 0)


def bolstered_posterior(model: PolynomialModel, dataset: Dataset, kernels: KernelSet, posterior: BayesianPosterior,
                        mc_samples: int = 1000, rng: np.random.Generator | None = None,
                        labels: ArrayLike | None = None) -> ErrorEstimate:
    """X-bolstering combined with the posterior predictive evaluated at the perturbed point."""
    _check_dims(model, dataset)
    rng = rng if rng is not None else np.random.default_rng(0)
    mats = kernels.realize(dataset.n, labels)
    if mats.shape[1] != dataset.d:
        raise ValueError(f"X-kernels must be {dataset.d}x{dataset.d}")
    base = _posterior_loss(model, posterior, dataset.features)
    contrib, sq_se, draws = _smooth(
        mats, mc_samples, rng, dataset.features,
        lambda i, x: _posterior_loss(model, posterior, x), base,
    )
    return _combine(contrib, sq_se, MPE_POSTERIOR, draws)


def true_error_mc(model: PolynomialModel, scenario: ExperimentScenario, mc_samples: int = 1000,
                  rng: np.random.Generator | None = None) -> ErrorEstimate:
    """Monte Carlo prediction error of ``model`` on fresh draws from the scenario."""
    if model.d != scenario.d:
        raise ValueError("model and scenario dimensions differ")
    rng = rng if rng is not None else np.random.default_rng(0)
    x, y = scenario.draw(mc_samples, rng)
    loss = (predict_many(model, x) - y) ** 2
    se = float(loss.std(ddof=1) / np.sqrt(mc_samples)) if mc_samples > 1 else 0.0
    return ErrorEstimate(float(loss.mean()), se, TRUE_MC, mc_samples)
