"""Polynomial least squares and conjugate Bayesian polynomial regression."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg
from numpy.typing import ArrayLike, NDArray

from .core import Dataset, NumericalError

MAX_CONDITION = 1e10


class RankDeficientError(NumericalError):
    """The polynomial design matrix does not have full column rank."""


@lru_cache(maxsize=None)
def monomial_exponents(d: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """All exponent multi-indices with total degree <= ``degree``, graded-lex order.

    >>> monomial_exponents(2, 2)
    ((0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2))
    """
    if d < 1 or degree < 0:
        raise ValueError("need d >= 1 and degree >= 0")
    terms = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(d), total):
            alpha = [0] * d
            for j in combo:
                alpha[j] += 1
            terms.append(tuple(alpha))
    return tuple(terms)


def polynomial_features(x: ArrayLike, degree: int) -> NDArray[np.float64]:
    """Monomials of ``x`` up to ``degree``.

    A single point (1-d array) gives a vector; a matrix of points gives one
    row of features per point.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        x = x.reshape(1)
    single = x.ndim == 1
    pts = x.reshape(1, -1) if single else x
    exps = np.array(monomial_exponents(pts.shape[1], degree), dtype=np.int64)
    feats = np.prod(pts[:, None, :] ** exps[None, :, :], axis=-1)
    return feats[0] if single else feats


@dataclass(frozen=True)
class PolynomialModel:
    """Fitted polynomial predictor over all monomials of total degree <= ``degree``."""

    d: int
    degree: int
    coefficients: NDArray[np.float64]

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=np.float64).reshape(-1)
        expected = len(monomial_exponents(self.d, self.degree))
        if coef.shape[0] != expected:
            raise ValueError(f"expected {expected} coefficients, got {coef.shape[0]}")
        if not np.all(np.isfinite(coef)):
            raise ValueError("coefficients must be finite")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    @property
    def terms(self) -> tuple[tuple[int, ...], ...]:
        return monomial_exponents(self.d, self.degree)

    def __call__(self, x: ArrayLike) -> NDArray[np.float64]:
        return predict_many(self, x)

    def to_text(self) -> str:
        lines = [f"d {self.d}", f"degree {self.degree}"]
        for alpha, c in zip(self.terms, self.coefficients):
            lines.append(" ".join(str(a) for a in alpha) + f" {float(c)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PolynomialModel":
        lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        d = int(lines[0][1])
        degree = int(lines[1][1])
        by_alpha = {tuple(int(a) for a in ln[:d]): float(ln[d]) for ln in lines[2:]}
        return cls(d, degree, np.array([by_alpha[a] for a in monomial_exponents(d, degree)]))


def predict(model: PolynomialModel, x: ArrayLike) -> float:
    return float(polynomial_features(np.atleast_1d(np.asarray(x, dtype=np.float64)), model.degree) @ model.coefficients)


def predict_many(model: PolynomialModel, x: ArrayLike) -> NDArray[np.float64]:
    x = np.asarray(x, dtype=np.float64).reshape(-1, model.d)
    return polynomial_features(x, model.degree) @ model.coefficients


def design_matrix(dataset: Dataset, degree: int) -> NDArray[np.float64]:
    return polynomial_features(dataset.features, degree)


def _check_design(design: NDArray, degree: int) -> None:
    n, p = design.shape
    if n < p:
        raise RankDeficientError(f"{n} observations cannot determine {p} polynomial coefficients (degree {degree})")
    sv = np.linalg.svd(design, compute_uv=False)
    cond = np.inf if sv[-1] == 0 else sv[0] / sv[-1]
    if cond >= MAX_CONDITION:
        rank = int(np.sum(sv > sv[0] * 1e-12))
        raise RankDeficientError(
            f"design matrix for degree {degree} is rank deficient (numerical rank {rank} of {p}, condition {cond:.3g})"
        )


def fit_least_squares(dataset: Dataset, degree: int) -> PolynomialModel:
    """Least-squares polynomial fit via a QR factorization of the design matrix."""
    design = design_matrix(dataset, degree)
    _check_design(design, degree)
    q, r = np.linalg.qr(design, mode="reduced")
    coef = scipy.linalg.solve_triangular(r, q.T @ dataset.targets)
    return PolynomialModel(dataset.d, degree, coef)


@dataclass(frozen=True)
class NormalInverseGammaPrior:
    """Conjugate prior: beta | s2 ~ N(mean, s2 * precision^-1), s2 ~ InvGamma(shape, scale)."""

    precision: float = 1e-6
    mean: float = 0.0
    noise_shape: float = 1e-2
    noise_scale: float = 1e-2

    def __post_init__(self):
        if not (self.precision > 0 and self.noise_shape > 0 and self.noise_scale > 0):
            raise ValueError("prior precision, noise shape and noise scale must be positive")


@dataclass(frozen=True)
class BayesianPosterior:
    d: int
    degree: int
    coefficient_mean: NDArray[np.float64]
    coefficient_precision_scaled: NDArray[np.float64]
    noise_shape: float
    noise_scale: float

    @property
    def degrees_of_freedom(self) -> float:
        return 2.0 * self.noise_shape

    @property
    def mean_model(self) -> PolynomialModel:
        return PolynomialModel(self.d, self.degree, self.coefficient_mean)


def fit_bayesian(dataset: Dataset, degree: int, prior: NormalInverseGammaPrior | None = None) -> BayesianPosterior:
    """Normal-Inverse-Gamma conjugate update for polynomial regression."""
    prior = prior or NormalInverseGammaPrior()
    design = design_matrix(dataset, degree)
    _check_design(design, degree)
    y = dataset.targets
    p = design.shape[1]
    prior_prec = prior.precision * np.eye(p)
    prior_mean = np.full(p, prior.mean)
    # Solve the regularized normal equations through QR of the stacked system
    # [X; sqrt(L0)] beta = [y; sqrt(L0) m0] to avoid forming X^T X for the mean.
    root = np.sqrt(prior.precision) * np.eye(p)
    stacked = np.vstack([design, root])
    rhs = np.concatenate([y, root @ prior_mean])
    q, r = np.linalg.qr(stacked, mode="reduced")
    mean = scipy.linalg.solve_triangular(r, q.T @ rhs)
    precision = r.T @ r
    precision = 0.5 * (precision + precision.T)
    resid = y - design @ mean
    dev = mean - prior_mean
    shape = prior.noise_shape + 0.5 * dataset.n
    scale = prior.noise_scale + 0.5 * (resid @ resid + dev @ prior_prec @ dev)
    return BayesianPosterior(dataset.d, degree, mean, precision, float(shape), float(scale))


def posterior_predictive_many(posterior: BayesianPosterior, x: ArrayLike) -> tuple[NDArray, NDArray]:
    """Student-t predictive mean and variance at each row of ``x``."""
    dof = posterior.degrees_of_freedom
    if dof <= 2:
        raise NumericalError(
            f"predictive variance undefined: {dof:g} degrees of freedom (need > 2); use a stronger prior or more data"
        )
    phi = polynomial_features(np.asarray(x, dtype=np.float64).reshape(-1, posterior.d), posterior.degree)
    mean = phi @ posterior.coefficient_mean
    chol = np.linalg.cholesky(posterior.coefficient_precision_scaled)
    v = scipy.linalg.solve_triangular(chol, phi.T, lower=True)
    leverage = np.sum(v**2, axis=0)
    scale2 = posterior.noise_scale / posterior.noise_shape * (1.0 + leverage)
    return mean, scale2 * dof / (dof - 2.0)


def posterior_predictive(posterior: BayesianPosterior, x: ArrayLike) -> tuple[float, float]:
    mean, var = posterior_predictive_many(posterior, np.atleast_1d(np.asarray(x, dtype=np.float64)))
    return float(mean[0]), float(var[0])
