"""Gaussian statistics primitives for feature-distribution alignment.

Everything here operates on dense float64 arrays: first/second moments of
feature batches, numerically careful covariance regularization and Cholesky
factorization, the closed-form KL divergence between multivariate normals,
count-clipped streaming moment updates, and moment-matched merging of
Gaussian mixtures into a single Gaussian.

Population (1/N) moments are used throughout, and the streaming update is
exact: with clipping disabled it reproduces the batch moments of everything
seen so far to floating-point accuracy regardless of how the stream was
partitioned.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf

__all__ = [
    "GaussianStats",
    "RunningStats",
    "MixtureWeights",
    "DecompositionError",
    "batch_moments",
    "cholesky_psd",
    "clipped_rate",
    "gaussian_kl",
    "merge_mixture",
    "regularize_cov",
    "running_update",
    "scale_eps",
    "uniform_weights",
]

# Relative symmetry slack for covariance inputs we did not build ourselves.
_SYM_TOL = 1e-8


class DecompositionError(ValueError):
    """Cholesky factorization failed; ``pivot`` is the 1-based failing minor."""

    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(
            f"matrix is not positive definite (leading minor {pivot} failed)"
        )


def _as_vector(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {x.shape}")
    return x


def _as_cov(cov, dim: int | None, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"{name} must be square, got shape {cov.shape}")
    if dim is not None and cov.shape[0] != dim:
        raise ValueError(f"{name} has dim {cov.shape[0]}, expected {dim}")
    scale = max(1.0, float(np.max(np.abs(cov))) if cov.size else 1.0)
    if float(np.max(np.abs(cov - cov.T))) > _SYM_TOL * scale:
        raise ValueError(f"{name} is not symmetric")
    # Exact symmetry from here on; IEEE addition makes (c + c.T)/2 bitwise
    # symmetric, so downstream identity checks can demand zero skew.
    return 0.5 * (cov + cov.T)


@dataclass
class GaussianStats:
    """First and second central moments of a feature distribution.

    Parameters
    ----------
    mean : ndarray, shape (d,)
    cov : ndarray, shape (d, d)
        Symmetric; symmetrized exactly on construction.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = _as_vector(self.mean, "mean")
        self.cov = _as_cov(self.cov, self.mean.shape[0], "cov")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def copy(self) -> "GaussianStats":
        return GaussianStats(self.mean.copy(), self.cov.copy())


@dataclass
class RunningStats:
    """Streaming mean/covariance with a count-clipped update rate.

    ``count`` is the number of samples absorbed so far. ``clip`` bounds the
    effective averaging horizon: once ``count`` reaches ``clip`` the
    per-sample rate stays at ``1/clip`` instead of decaying, so the estimate
    keeps tracking a drifting stream. ``clip=None`` disables clipping, in
    which case the stats equal the exact population moments of all samples
    seen.
    """

    mean: np.ndarray
    cov: np.ndarray
    count: int = 0
    clip: int | None = None

    def __post_init__(self):
        self.mean = _as_vector(self.mean, "mean")
        self.cov = _as_cov(self.cov, self.mean.shape[0], "cov")
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        if self.clip is not None and self.clip < 1:
            raise ValueError("clip must be a positive integer or None")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def snapshot(self) -> GaussianStats:
        return GaussianStats(self.mean.copy(), self.cov.copy())

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.cov.copy(), self.count, self.clip)

    @classmethod
    def zeros(cls, dim: int, clip: int | None = None) -> "RunningStats":
        return cls(np.zeros(dim), np.zeros((dim, dim)), 0, clip)


@dataclass
class MixtureWeights:
    """Nonnegative component weights summing to one."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = _as_vector(self.weights, "weights")
        if self.weights.size == 0:
            raise ValueError("weights must be non-empty")
        if np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative")
        total = float(self.weights.sum())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total}")

    def __len__(self) -> int:
        return self.weights.shape[0]


def uniform_weights(k: int) -> MixtureWeights:
    if k < 1:
        raise ValueError("need at least one component")
    return MixtureWeights(np.full(k, 1.0 / k))


def scale_eps(cov: np.ndarray, rel: float = 1e-5) -> float:
    """Scale-aware ridge: ``rel * trace(cov) / d``."""
    cov = np.asarray(cov, dtype=np.float64)
    d = cov.shape[0]
    return rel * float(np.trace(cov)) / d if d else 0.0


def regularize_cov(cov: np.ndarray, eps: float | None = None) -> np.ndarray:
    """Return ``cov + eps * I`` with exact symmetry.

    ``eps=None`` uses the scale-aware default :func:`scale_eps`. Raises on
    non-square or asymmetric input, and on negative ``eps``.
    """
    cov = _as_cov(cov, None, "cov")
    if eps is None:
        eps = scale_eps(cov)
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    out = cov + eps * np.eye(cov.shape[0])
    return 0.5 * (out + out.T)


def cholesky_psd(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular Cholesky factor ``L`` with ``L @ L.T == cov``.

    Raises
    ------
    DecompositionError
        If the matrix is not positive definite; carries the 1-based index of
        the failing leading minor.
    """
    cov = _as_cov(cov, None, "cov")
    if cov.shape[0] == 0:
        raise ValueError("cov must be non-empty")
    c, info = dpotrf(cov, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise DecompositionError(int(info))
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    return c


def gaussian_kl(p: GaussianStats, q: GaussianStats) -> float:
    """Closed-form ``KL(p || q)`` between multivariate normals.

    .. math::

        \\tfrac12\\bigl[\\log\\tfrac{|\\Sigma_q|}{|\\Sigma_p|} - d
        + (\\mu_q-\\mu_p)^\\top \\Sigma_q^{-1} (\\mu_q-\\mu_p)
        + \\operatorname{tr}(\\Sigma_q^{-1}\\Sigma_p)\\bigr]

    Both covariances must already be positive definite (regularize first).
    Log-determinants come from Cholesky factors. The result is nonnegative
    up to roundoff (>= -1e-10) and exactly 0.0 when ``p == q`` bitwise.
    """
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")
    d = p.dim
    lp = cholesky_psd(p.cov)
    lq = cholesky_psd(q.cov)
    logdet_p = 2.0 * float(np.sum(np.log(np.diag(lp))))
    logdet_q = 2.0 * float(np.sum(np.log(np.diag(lq))))
    diff = q.mean - p.mean
    y = solve_triangular(lq, diff, lower=True)
    mahal = float(y @ y)
    m = solve_triangular(lq, lp, lower=True)
    trace = float(np.sum(m * m))
    return 0.5 * (logdet_q - logdet_p - d + mahal + trace)


def batch_moments(features: np.ndarray) -> GaussianStats:
    """Population mean and covariance (1/N normalization) of a batch.

    Parameters
    ----------
    features : ndarray, shape (n, d)
        At least one row.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features[:, None]
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("features must be a non-empty (n, d) array")
    n = features.shape[0]
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / n
    return GaussianStats(mean, cov)


def clipped_rate(count: int, clip: int | None) -> float:
    """Per-update rate ``1/count``, floored at ``1/clip`` once count >= clip."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if clip is None:
        return 1.0 / count
    if clip < 1:
        raise ValueError("clip must be >= 1")
    return 1.0 / count if count < clip else 1.0 / clip


def running_update(stats: RunningStats, batch: np.ndarray) -> RunningStats:
    """Absorb a batch into streaming moments and return the new state.

    With ``count' = count + n`` and rate ``a = clipped_rate(count', clip)``:

        delta = a * sum_i (z_i - mean)
        mean' = mean + delta
        cov'  = cov + a * sum_i [(z_i - mean)(z_i - mean)^T - cov]
                - delta delta^T

    symmetrized exactly. Unclipped, this reproduces population batch moments
    of the full history; clipped, it becomes an exponential-horizon tracker.
    The input ``stats`` is not mutated.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ValueError("batch must be a non-empty (n, d) array")
    if batch.shape[1] != stats.dim:
        raise ValueError(
            f"dimension mismatch: batch has {batch.shape[1]}, stats {stats.dim}"
        )
    n = batch.shape[0]
    new_count = stats.count + n
    a = clipped_rate(new_count, stats.clip)
    centered = batch - stats.mean
    delta = a * centered.sum(axis=0)
    mean = stats.mean + delta
    cov = stats.cov + a * (centered.T @ centered - n * stats.cov) - np.outer(delta, delta)
    cov = 0.5 * (cov + cov.T)
    return RunningStats(mean, cov, new_count, stats.clip)


def merge_mixture(
    components: list[GaussianStats], weights: MixtureWeights
) -> GaussianStats:
    """Moment-matched single Gaussian for a mixture of Gaussians.

    mean* = sum_k w_k mu_k;  cov* = sum_k w_k (S_k + (mu_k - mean*)(mu_k - mean*)^T).
    """
    if len(components) == 0:
        raise ValueError("components must be non-empty")
    if len(components) != len(weights):
        raise ValueError(
            f"got {len(components)} components but {len(weights)} weights"
        )
    dim = components[0].dim
    for c in components:
        if c.dim != dim:
            raise ValueError("mixture components disagree on dimension")
    w = weights.weights
    mean = sum(wk * c.mean for wk, c in zip(w, components))
    cov = np.zeros((dim, dim))
    for wk, c in zip(w, components):
        d = c.mean - mean
        cov += wk * (c.cov + np.outer(d, d))
    cov = 0.5 * (cov + cov.T)
    return GaussianStats(mean, cov)
