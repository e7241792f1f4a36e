"""Bolstering kernel selection.

Two families of estimators are provided:

* method of moments (MM): a scalar ``sigma`` such that bolstered kernels
  ``sigma**2 * base`` match the sample's mean nearest-neighbour Mahalanobis
  distance. ``estimate_sigma_chi`` is the closed-form small-kernel
  approximation; ``estimate_sigma_exact`` solves the moment equation with a
  Monte Carlo expectation.
* maximum pseudo-likelihood (MPE): one covariance per point, fitted by an EM
  iteration on a leave-one-out Gaussian mixture (``mpe_em``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import gammaln, logsumexp

from .core import (
    Dataset,
    NumericalError,
    _whiten,
    as_covariance,
    gaussian_logpdf_factor,
    mean_min_distance,
    mean_min_distance_per_class,
)

SHARED = "shared-scalar"
PER_CLASS = "per-class-scalar"
PER_POINT = "per-point"
KINDS = (SHARED, PER_CLASS, PER_POINT)


@dataclass(frozen=True)
class KernelSet:
    """Bolstering covariances for a sample.

    Scalar kinds store a base matrix and standard-deviation scales (the
    realized kernel is ``scale**2 * base``); ``per-point`` stores one matrix
    per observation.
    """

    kind: str
    dim: int
    base: NDArray[np.float64] | None = None
    scales: dict[int, float] = field(default_factory=dict)
    matrices: NDArray[np.float64] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == PER_POINT:
            mats = np.asarray(self.matrices, dtype=np.float64)
            if mats.ndim != 3 or mats.shape[1:] != (self.dim, self.dim):
                raise ValueError(f"per-point kernels must have shape (n, {self.dim}, {self.dim})")
            for m in mats:
                as_covariance(m)
            object.__setattr__(self, "matrices", mats)
        else:
            object.__setattr__(self, "base", as_covariance(self.base, self.dim))
            if not self.scales or any(not s >= 0 for s in self.scales.values()):
                raise ValueError("scalar kernels need nonnegative scales")

    @classmethod
    def shared(cls, sigma: float, base: ArrayLike) -> "KernelSet":
        base = np.atleast_2d(np.asarray(base, dtype=np.float64))
        return cls(SHARED, base.shape[0], base=base, scales={0: float(sigma)})

    @classmethod
    def per_class(cls, scales: dict[int, float], base: ArrayLike) -> "KernelSet":
        base = np.atleast_2d(np.asarray(base, dtype=np.float64))
        return cls(PER_CLASS, base.shape[0], base=base, scales={int(k): float(v) for k, v in scales.items()})

    @classmethod
    def per_point(cls, matrices: ArrayLike) -> "KernelSet":
        mats = np.asarray(matrices, dtype=np.float64)
        return cls(PER_POINT, mats.shape[1], matrices=mats)

    @classmethod
    def zeros(cls, n: int, dim: int) -> "KernelSet":
        return cls.per_point(np.zeros((n, dim, dim)))

    def realize(self, n: int, labels: ArrayLike | None = None) -> NDArray[np.float64]:
        """Covariance matrix for each of ``n`` observations, shape ``(n, dim, dim)``."""
        if self.kind == PER_POINT:
            if self.matrices.shape[0] != n:
                raise ValueError(f"kernel set holds {self.matrices.shape[0]} matrices, dataset has {n} points")
            return self.matrices
        if self.kind == SHARED:
            scale = self.scales[0]
            return np.broadcast_to(scale**2 * self.base, (n, self.dim, self.dim)).copy()
        if labels is None:
            raise ValueError("per-class kernels need a label per observation")
        labels = np.asarray(labels).reshape(-1)
        missing = set(int(v) for v in np.unique(labels)) - set(self.scales)
        if missing:
            raise ValueError(f"no kernel scale for labels {sorted(missing)}")
        return np.stack([self.scales[int(lab)] ** 2 * self.base for lab in labels])

    def to_text(self) -> str:
        lines = [f"kind {self.kind}", f"dim {self.dim}"]
        if self.kind == PER_POINT:
            lines.append(f"count {self.matrices.shape[0]}")
            for i, m in enumerate(self.matrices):
                lines.append(f"matrix {i}")
                lines.extend(" ".join(repr(float(v)) for v in row) for row in m)
        else:
            for label, s in sorted(self.scales.items()):
                lines.append(f"scale {label} {float(s)!r}")
            lines.append("base")
            lines.extend(" ".join(repr(float(v)) for v in row) for row in self.base)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "KernelSet":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        kind = lines[0].split()[1]
        dim = int(lines[1].split()[1])

        def read_matrix(start: int) -> NDArray:
            return np.array([[float(v) for v in lines[start + r].split()] for r in range(dim)])

        if kind == PER_POINT:
            count = int(lines[2].split()[1])
            mats = [read_matrix(4 + i * (dim + 1)) for i in range(count)]
            return cls.per_point(np.array(mats).reshape(count, dim, dim))
        scales = {}
        pos = 2
        while lines[pos].startswith("scale"):
            _, label, value = lines[pos].split()
            scales[int(label)] = float(value)
            pos += 1
        base = read_matrix(pos + 1)
        return cls(kind, dim, base=base, scales=scales)


# ---------------------------------------------------------------------------
# Method of moments
# ---------------------------------------------------------------------------


def chi_mean(d: int) -> float:
    """Mean of a chi distribution with ``d`` degrees of freedom."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return float(np.sqrt(2.0) * np.exp(gammaln((d + 1) / 2.0) - gammaln(d / 2.0)))


def estimate_sigma_chi(dataset: Dataset, base_sigma: ArrayLike) -> float:
    return mean_min_distance(dataset, base_sigma) / chi_mean(dataset.d)


def estimate_sigma_chi_per_class(dataset: Dataset, labels: ArrayLike, base_sigma: ArrayLike) -> dict[int, float]:
    c = chi_mean(dataset.d)
    return {k: v / c for k, v in mean_min_distance_per_class(dataset, labels, base_sigma).items()}


class MinDistanceSampler:
    """Monte Carlo expectation of the bolstered nearest-sample distance.

    A bolstered test point is drawn by picking a sample point uniformly and
    perturbing it with ``N(0, sigma**2 * base)``; its distance is the minimum
    Mahalanobis distance to *any* sample point (the centre included). All
    draws are made once, so evaluations at different ``sigma`` share common
    random numbers and the estimate is continuous in ``sigma``.
    """

    def __init__(self, points: ArrayLike, base_sigma: ArrayLike, mc_samples: int, rng: np.random.Generator,
                 chunk: int = 4096):
        if mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        self.white = _whiten(np.atleast_2d(points), np.atleast_2d(base_sigma))
        n, k = self.white.shape
        self.centers = rng.integers(0, n, size=mc_samples)
        self.noise = rng.standard_normal((mc_samples, k))
        self.chunk = chunk

    def distances(self, sigma: float) -> NDArray[np.float64]:
        out = np.empty(self.noise.shape[0])
        for lo in range(0, out.shape[0], self.chunk):
            hi = lo + self.chunk
            x = self.white[self.centers[lo:hi]] + sigma * self.noise[lo:hi]
            sq = np.sum((x[:, None, :] - self.white[None, :, :]) ** 2, axis=-1)
            out[lo:hi] = np.sqrt(sq.min(axis=1))
        return out

    def __call__(self, sigma: float) -> tuple[float, float]:
        dist = self.distances(sigma)
        m = dist.shape[0]
        se = float(dist.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
        return float(dist.mean()), se


def expected_min_distance(dataset: Dataset, sigma_scale: float, base_sigma: ArrayLike, mc_samples: int,
                          rng: np.random.Generator) -> tuple[float, float]:
    """Monte Carlo estimate and standard error of the bolstered nearest-sample distance."""
    return MinDistanceSampler(dataset.features, base_sigma, mc_samples, rng)(sigma_scale)


@dataclass
class MomentSolution:
    sigma: float
    target: float
    expected: float
    standard_error: float
    bracket: tuple[float, float]
    iterations: int

    @property
    def residual(self) -> float:
        return self.expected - self.target


class BracketError(NumericalError):
    pass


def solve_moment_equation(dataset: Dataset, base_sigma: ArrayLike, mc_samples: int = 2000,
                          tolerance: float | None = None, rng: np.random.Generator | None = None,
                          max_iterations: int = 200) -> MomentSolution:
    """Bisection for ``sigma`` with E[bolstered min distance](sigma) = mean NN distance.

    The search starts at the chi estimate, which is a lower bound of the
    root: the bolstered distance never exceeds the distance to the centre,
    so ``E / sigma <= E[chi]``. The upper end is found by doubling.
    """
    if dataset.n < 2:
        raise ValueError("need at least 2 points: no nearest neighbour exists")
    rng = rng if rng is not None else np.random.default_rng(0)
    target = mean_min_distance(dataset, base_sigma)
    if tolerance is None:
        tolerance = 1e-4 * target
    sampler = MinDistanceSampler(dataset.features, base_sigma, mc_samples, rng)

    def f(s: float) -> float:
        return sampler(s)[0] - target

    lo = target / chi_mean(dataset.d)
    f_lo = f(lo)
    tries = 0
    while f_lo > 0:
        lo *= 0.5
        f_lo = f(lo)
        tries += 1
        if tries > 60:
            raise BracketError(f"no lower bracket: f({lo:.3g}) = {f_lo:.3g} > 0")
    hi = 2.0 * lo
    f_hi = f(hi)
    tries = 0
    while f_hi < 0:
        lo, f_lo = hi, f_hi
        hi *= 2.0
        f_hi = f(hi)
        tries += 1
        if tries > 60:
            raise BracketError(f"no upper bracket: residuals f({lo:.3g}) = {f_lo:.3g}, f({hi:.3g}) = {f_hi:.3g}")
    bracket = (lo, hi)

    mid = lo if abs(f_lo) <= abs(f_hi) else hi
    f_mid = min(f_lo, f_hi, key=abs)
    it = 0
    while abs(f_mid) > tolerance and it < max_iterations and hi - lo > 1e-15 * hi:
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if f_mid < 0:
            lo = mid
        else:
            hi = mid
        it += 1
    expected, se = sampler(mid)
    return MomentSolution(mid, target, expected, se, bracket, it)


def estimate_sigma_exact(dataset: Dataset, base_sigma: ArrayLike, mc_samples: int = 2000,
                         tolerance: float | None = None, rng: np.random.Generator | None = None) -> float:
    return solve_moment_equation(dataset, base_sigma, mc_samples, tolerance, rng).sigma


# ---------------------------------------------------------------------------
# Maximum pseudo-likelihood (EM)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EmConfig:
    lam: float = 1.0
    epsilon_c: float = 1e-6
    max_iterations: int = 500

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if not self.epsilon_c > 0:
            raise ValueError("epsilon_c must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class EmResult:
    kernels: KernelSet
    iterations: int
    converged: bool
    deltas: list[float]


def _pairwise_log_density(points: NDArray, kernels: NDArray) -> NDArray[np.float64]:
    """``out[i, j] = log N(points[j]; points[i], kernels[i])``."""
    n, k = points.shape
    try:
        chol = np.linalg.cholesky(kernels)
    except np.linalg.LinAlgError:
        chol = np.stack([gaussian_logpdf_factor(m) for m in kernels])
    inv = np.linalg.inv(chol)
    diff = points[None, :, :] - points[:, None, :]
    z = np.einsum("ikl,ijl->ijk", inv, diff)
    log_det = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return -0.5 * (np.sum(z**2, axis=-1) + log_det[:, None] + k * np.log(2.0 * np.pi))


def em_weights(points: ArrayLike, kernels: ArrayLike, lam: float) -> NDArray[np.float64]:
    """E-step responsibilities ``w[i, j]`` of kernel ``i`` for point ``j``.

    ``(lam + p_i(X_j)) / (lam * (n - 1) + sum_{i != j} p_i(X_j))`` off the
    diagonal, zero on it. Each column sums to one.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    kernels = np.asarray(kernels, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    log_p = _pairwise_log_density(points, kernels)
    log_lam = np.log(lam) if lam > 0 else -np.inf
    log_num = np.logaddexp(log_lam, log_p)
    np.fill_diagonal(log_num, -np.inf)
    weights = np.exp(log_num - logsumexp(log_num, axis=0, keepdims=True))
    np.fill_diagonal(weights, 0.0)
    return weights


def _m_step(points: NDArray, weights: NDArray) -> NDArray[np.float64]:
    n = points.shape[0]
    diff = points[None, :, :] - points[:, None, :]
    mats = np.einsum("ij,ijk,ijl->ikl", weights, diff, diff) / (n - 1)
    return 0.5 * (mats + np.swapaxes(mats, 1, 2))


def closed_form_kernels(points: ArrayLike) -> NDArray[np.float64]:
    """Large-lambda limit: ``(n-1)^-2 sum_{j != i} (X_j - X_i)(X_j - X_i)^T``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = points.shape[0]
    uniform = np.full((n, n), 1.0 / (n - 1))
    np.fill_diagonal(uniform, 0.0)
    return _m_step(points, uniform)


def mpe_em(points: ArrayLike, config: EmConfig | None = None, check_psd: bool = False) -> EmResult:
    """Per-point kernels maximizing the leave-one-out pseudo-likelihood.

    Starts from the large-lambda closed form and alternates E and M steps
    until the largest entrywise kernel change drops below ``epsilon_c``.
    Hitting ``max_iterations`` is reported through ``converged=False``.
    """
    config = config or EmConfig()
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[0] < 2:
        raise ValueError("need at least 2 points")
    kernels = closed_form_kernels(points)
    deltas: list[float] = []
    converged = False
    it = 0
    while it < config.max_iterations:
        weights = em_weights(points, kernels, config.lam)
        updated = _m_step(points, weights)
        it += 1
        if check_psd:
            for m in updated:
                as_covariance(m)
        delta = float(np.abs(updated - kernels).max())
        deltas.append(delta)
        kernels = updated
        if delta < config.epsilon_c:
            converged = True
            break
    return EmResult(KernelSet.per_point(kernels), it, converged, deltas)


def xy_augment(dataset: Dataset) -> NDArray[np.float64]:
    return np.column_stack([dataset.features, dataset.targets])
