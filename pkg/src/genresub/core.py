"""Shared types, synthetic data, Mahalanobis statistics and Gaussian sampling."""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass
from math import comb
from pathlib import Path

import numpy as np
from numpy.typing import ArrayLike, NDArray


class NumericalError(ValueError):
    """A matrix or solver failed a numerical precondition."""


class SingularMetricError(NumericalError):
    """The covariance defining a Mahalanobis metric is not invertible."""


@dataclass(frozen=True)
class Dataset:
    """An i.i.d. regression sample of ``n`` points in ``R^d``."""

    features: NDArray[np.float64]
    targets: NDArray[np.float64]

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        y = np.array(self.targets, dtype=np.float64).reshape(-1)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"features must be an n x d matrix with n, d >= 1, got shape {x.shape}")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"features have {x.shape[0]} rows but targets have {y.shape[0]}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([f"x{j + 1}" for j in range(self.d)] + ["y"])
        for xi, yi in zip(self.features, self.targets):
            writer.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        """Parse ``x1,...,xd,y`` CSV text. Extra columns (e.g. labels) are ignored."""
        rows = list(csv.reader(io.StringIO(text)))
        if not rows:
            raise ValueError("empty CSV")
        header = [h.strip() for h in rows[0]]
        xcols = [k for k, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
        xcols.sort(key=lambda k: int(header[k][1:]))
        if "y" not in header or not xcols:
            raise ValueError("CSV header must contain x1..xd and y columns")
        ycol = header.index("y")
        body = [r for r in rows[1:] if r]
        if not body:
            raise ValueError("CSV has no data rows")
        x = np.array([[float(r[k]) for k in xcols] for r in body])
        y = np.array([float(r[ycol]) for r in body])
        return cls(x, y)

    @classmethod
    def read_csv(cls, path: str | Path) -> "Dataset":
        return cls.from_csv(Path(path).read_text())


def num_polynomial_terms(d: int, degree: int) -> int:
    return comb(d + degree, degree)


@dataclass(frozen=True)
class ExperimentScenario:
    d: int
    p_g: int
    p_f: int
    sigma: float
    n: int
    mc_true_error: int = 1000
    replicates: int = 100

    def __post_init__(self):
        if self.d < 1 or self.p_g < 1 or self.p_f < 1:
            raise ValueError("d, p_g and p_f must be >= 1")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        n_terms = num_polynomial_terms(self.d, self.p_f)
        if self.n <= n_terms:
            raise ValueError(
                f"n={self.n} must exceed the {n_terms} polynomial terms of degree {self.p_f} in d={self.d}"
            )
        if self.mc_true_error < 1 or self.replicates < 1:
            raise ValueError("mc_true_error and replicates must be >= 1")

    @property
    def id(self) -> str:
        return f"d{self.d}_s{self.sigma:g}_n{self.n}_pg{self.p_g}_pf{self.p_f}"

    def target_function(self, x: ArrayLike) -> NDArray[np.float64]:
        """Noiseless generator ``(1 + sum_j x_j) ** p_g`` evaluated row-wise."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return (1.0 + x.sum(axis=1)) ** self.p_g

    def draw(self, size: int, rng: np.random.Generator) -> tuple[NDArray, NDArray]:
        x = rng.uniform(0.0, 1.0, size=(size, self.d))
        y = self.target_function(x) + self.sigma * rng.standard_normal(size)
        return x, y


# Stable small integers for estimator/purpose tags used in stream derivation.
_TAG_CODES: dict[str, int] = {}


def tag_code(tag: str) -> int:
    code = _TAG_CODES.get(tag)
    if code is None:
        code = zlib.crc32(tag.encode("utf-8"))
        _TAG_CODES[tag] = code
    return code


def derive_rng(master_seed: int, *keys: int | str) -> np.random.Generator:
    """Independent stream keyed by ``(master_seed, *keys)``.

    Strings are mapped through a CRC32 so estimator tags can be used as keys.
    Streams depend only on the key, never on call order.
    """
    spawn_key = tuple(tag_code(k) if isinstance(k, str) else int(k) for k in keys)
    ss = np.random.SeedSequence(entropy=int(master_seed) & (2**64 - 1), spawn_key=spawn_key)
    return np.random.Generator(np.random.PCG64(ss))


def generate_synthetic(scenario: ExperimentScenario, seed: int) -> Dataset:
    x, y = scenario.draw(scenario.n, derive_rng(seed, "data"))
    return Dataset(x, y)


def as_covariance(matrix: ArrayLike, k: int | None = None) -> NDArray[np.float64]:
    """Validate a symmetric PSD matrix (scalars become 1x1)."""
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"covariance must be square, got shape {m.shape}")
    if k is not None and m.shape[0] != k:
        raise ValueError(f"covariance must be {k}x{k}, got {m.shape[0]}x{m.shape[0]}")
    if not np.all(np.isfinite(m)):
        raise NumericalError("covariance has non-finite entries")
    scale = max(np.abs(m).max(), np.finfo(float).tiny)
    if np.abs(m - m.T).max() > 1e-12 * scale:
        raise NumericalError("covariance is not symmetric")
    trace = np.trace(m)
    if trace < 0 or np.linalg.eigvalsh(m).min() < -1e-10 * max(trace, 0.0):
        raise NumericalError("covariance is not positive semidefinite")
    return m


def _whitening_factor(sigma_matrix: NDArray) -> NDArray:
    s = as_covariance(sigma_matrix)
    if np.linalg.cond(s) >= 1e12:
        raise SingularMetricError("covariance is singular or ill-conditioned (condition number >= 1e12)")
    return np.linalg.cholesky(s)


def _whiten(points: NDArray, sigma_matrix: ArrayLike) -> NDArray:
    chol = _whitening_factor(np.asarray(sigma_matrix, dtype=np.float64))
    # Rows w satisfy ||w_a - w_b|| = Mahalanobis distance between the rows a, b.
    return np.linalg.solve(chol, np.asarray(points, dtype=np.float64).T).T


def mahalanobis(x: ArrayLike, x_other: ArrayLike, sigma_matrix: ArrayLike) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x_other = np.atleast_1d(np.asarray(x_other, dtype=np.float64))
    w = _whiten(np.vstack([x, x_other]), np.atleast_2d(sigma_matrix))
    return float(np.sqrt(np.sum((w[0] - w[1]) ** 2)))


def pairwise_mahalanobis(points: ArrayLike, sigma_matrix: ArrayLike) -> NDArray[np.float64]:
    w = _whiten(np.atleast_2d(points), np.atleast_2d(sigma_matrix))
    diff = w[:, None, :] - w[None, :, :]
    return np.sqrt(np.sum(diff**2, axis=-1))


def _mean_nn_distance(points: NDArray, sigma_matrix: ArrayLike) -> float:
    dist = pairwise_mahalanobis(points, sigma_matrix)
    np.fill_diagonal(dist, np.inf)
    return float(dist.min(axis=1).mean())


def mean_min_distance(dataset: Dataset, sigma_matrix: ArrayLike) -> float:
    """Average distance from each sample point to its nearest other point."""
    if dataset.n < 2:
        raise ValueError("need at least 2 points: no nearest neighbour exists")
    return _mean_nn_distance(dataset.features, sigma_matrix)


def mean_min_distance_per_class(dataset: Dataset, labels: ArrayLike, sigma_matrix: ArrayLike) -> dict[int, float]:
    """Per-label mean nearest-neighbour distance restricted to same-label points.

    Labels with fewer than two members have no same-label neighbour and are
    left out of the result.
    """
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != dataset.n:
        raise ValueError("labels must have one entry per observation")
    out: dict[int, float] = {}
    for label in np.unique(labels):
        members = dataset.features[labels == label]
        if members.shape[0] >= 2:
            out[int(label)] = _mean_nn_distance(members, sigma_matrix)
    return out


def psd_sqrt(cov: ArrayLike) -> NDArray[np.float64]:
    """Square-root factor ``L`` with ``L @ L.T ~= cov``.

    Plain Cholesky, then Cholesky with jitter ``1e-10 * trace / k``, then an
    eigendecomposition with negative eigenvalues clipped to zero.
    """
    cov = as_covariance(cov)
    support = np.diag(cov) > 0
    if not support.all():
        # A zero diagonal entry of a PSD matrix zeroes its row and column;
        # keep those directions exactly degenerate.
        factor = np.zeros_like(cov)
        if support.any():
            factor[np.ix_(support, support)] = psd_sqrt(cov[np.ix_(support, support)])
        return factor
    k = cov.shape[0]
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10 * np.trace(cov) / k
    try:
        return np.linalg.cholesky(cov + jitter * np.eye(k))
    except np.linalg.LinAlgError:
        pass
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_mvn(mean: ArrayLike, cov: ArrayLike, rng: np.random.Generator, size: int | None = None) -> NDArray[np.float64]:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    factor = psd_sqrt(np.atleast_2d(cov))
    if factor.shape[0] != mean.shape[0]:
        raise ValueError("mean and covariance dimensions differ")
    shape = (mean.shape[0],) if size is None else (size, mean.shape[0])
    z = rng.standard_normal(shape)
    return mean + z @ factor.T


def gaussian_logpdf_factor(cov: NDArray) -> NDArray[np.float64]:
    """Invertible Cholesky factor for density evaluation.

    Singular kernels (e.g. from collinear points) get a jitter that grows from
    ``1e-10 * trace / k`` until the factorization succeeds.
    """
    k = cov.shape[0]
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    base = np.trace(cov) / k
    if not base > 0:
        base = 1.0
    jitter = 1e-10 * base
    for _ in range(12):
        try:
            return np.linalg.cholesky(cov + jitter * np.eye(k))
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalError("kernel could not be regularized into a positive-definite matrix")


def gaussian_logpdf(points: NDArray, mean: NDArray, chol: NDArray) -> NDArray[np.float64]:
    k = chol.shape[0]
    z = np.linalg.solve(chol, (np.atleast_2d(points) - mean).T)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (np.sum(z**2, axis=0) + log_det + k * np.log(2.0 * np.pi))
