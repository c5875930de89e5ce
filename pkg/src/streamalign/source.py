"""Source feature statistics: estimated from data, or inferred without it.

With labeled source data available, per-class and global feature Gaussians
are plain population moments. Without any source data, class means are
recovered from the classifier weights alone by maximizing each class's own
softmax score over a nonnegative feature vector (rectified features are
nonnegative, enforced by an elementwise-square parameterization), and the
per-class covariances are filled in as a shared isotropic ``gamma * I``
scaled to the spread of the recovered means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .banks import SourceBank
from .gaussian import (
    GaussianStats,
    batch_moments,
    merge_mixture,
    uniform_weights,
)

__all__ = [
    "InferenceConfig",
    "InferenceResult",
    "estimate_source_stats",
    "inference_objective",
    "infer_source_means",
    "choose_gamma",
    "build_inferred_bank",
]

_GAMMA_FLOOR = 1e-6


def estimate_source_stats(
    features: np.ndarray, labels: np.ndarray, n_classes: int | None = None
) -> SourceBank:
    """Population per-class and global moments of labeled source features.

    Every class must appear with at least two samples (a one-sample class
    has no covariance). Class weights are uniform; the global Gaussian uses
    all samples pooled.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[0] != labels.shape[0]:
        raise ValueError("features must be (n, d) with one label per row")
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    class_stats = []
    for k in range(n_classes):
        rows = features[labels == k]
        if rows.shape[0] < 2:
            raise ValueError(
                f"class {k} has {rows.shape[0]} samples; need at least 2"
            )
        class_stats.append(batch_moments(rows))
    return SourceBank(
        class_stats,
        batch_moments(features),
        uniform_weights(n_classes),
        provenance="estimated",
    )


@dataclass
class InferenceConfig:
    """RMSprop settings for recovering class means from classifier weights."""

    lr: float = 0.001
    weight_decay: float = 0.001  # applied to the square-root parameters only
    alpha: float = 0.99  # squared-gradient smoothing
    eps: float = 1e-8
    max_iters: int = 5000
    patience: int = 100  # stop when best loss improves < min_improvement over this window
    min_improvement: float = 1e-7
    init_scale: float = 0.1
    seed: int = 0


@dataclass
class InferenceResult:
    """Recovered class means with optimization diagnostics.

    ``means[k]`` is elementwise nonnegative. ``self_consistent[k]`` is true
    when the classifier assigns the recovered mean of class ``k`` back to
    class ``k``.
    """

    means: np.ndarray  # (K, d), nonnegative
    self_consistent: np.ndarray  # (K,) bool
    loss_trace: list[float] = field(default_factory=list)
    iterations: int = 0

    @property
    def consistency_rate(self) -> float:
        return float(self.self_consistent.mean())


def inference_objective(
    classifier: np.ndarray, mu_hat: np.ndarray
) -> tuple[float, np.ndarray]:
    """Objective and gradient for the mean-recovery problem.

    With ``mu_k = mu_hat_k ** 2`` (elementwise, keeping means nonnegative)
    and logits ``W mu_k``:

        L = sum_k -log softmax(W mu_k)[k]

    Returns ``(L, dL/dmu_hat)``; weight decay is *not* included here.
    """
    w = np.asarray(classifier, dtype=np.float64)
    mu = mu_hat**2  # (K, d)
    logits = mu @ w.T  # row k: logits of class k's candidate mean
    shifted = logits - logits.max(axis=1, keepdims=True)
    q = np.exp(shifted)
    q /= q.sum(axis=1, keepdims=True)
    k = w.shape[0]
    idx = np.arange(k)
    value = float(-np.log(np.maximum(q[idx, idx], 1e-300)).sum())
    d_logits = q.copy()
    d_logits[idx, idx] -= 1.0
    d_mu = d_logits @ w  # (K, d)
    return value, 2.0 * mu_hat * d_mu


def infer_source_means(
    classifier: np.ndarray, cfg: InferenceConfig | None = None
) -> InferenceResult:
    """Recover one nonnegative feature-space mean per class from ``W`` alone.

    Joint RMSprop descent on the square-root parameterization, starting from
    ``|N(0, init_scale)|`` draws. Stops at ``max_iters`` or when the best
    objective value has improved by less than ``min_improvement`` over the
    trailing ``patience`` iterations.
    """
    if cfg is None:
        cfg = InferenceConfig()
    w = np.asarray(classifier, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("classifier must be a (K, d) matrix")
    rng = np.random.default_rng(cfg.seed)
    mu_hat = np.abs(rng.normal(0.0, cfg.init_scale, size=w.shape))
    sq_avg = np.zeros_like(mu_hat)

    trace: list[float] = []
    best = np.inf
    best_at = 0
    it = 0
    for it in range(1, cfg.max_iters + 1):
        value, grad = inference_objective(w, mu_hat)
        trace.append(value)
        if value < best - cfg.min_improvement:
            best = value
            best_at = it
        elif it - best_at >= cfg.patience:
            break
        grad = grad + cfg.weight_decay * mu_hat
        sq_avg = cfg.alpha * sq_avg + (1.0 - cfg.alpha) * grad**2
        mu_hat = mu_hat - cfg.lr * grad / (np.sqrt(sq_avg) + cfg.eps)

    means = mu_hat**2
    assigned = (means @ w.T).argmax(axis=1)
    self_consistent = assigned == np.arange(w.shape[0])
    return InferenceResult(means, self_consistent, trace, it)


def choose_gamma(means: np.ndarray, floor: float = _GAMMA_FLOOR) -> float:
    """Isotropic covariance scale from the spread of the class means.

    gamma = (largest singular value of the population covariance of the
    mean set) / 30, floored at ``floor`` so degenerate mean sets (all
    identical) still yield a positive-definite bank.
    """
    means = np.asarray(means, dtype=np.float64)
    if means.ndim != 2 or means.shape[0] < 1:
        raise ValueError("means must be a (K, d) matrix")
    cov = batch_moments(means).cov
    top = float(np.linalg.svd(cov, compute_uv=False)[0]) if cov.size else 0.0
    gamma = top / 30.0
    return gamma if gamma > floor else floor


def build_inferred_bank(means: np.ndarray, gamma: float) -> SourceBank:
    """Source bank from inferred means: per-class ``N(mu_k, gamma I)``.

    Uniform class weights; the global Gaussian is the moment-matched merge
    of the class components.
    """
    means = np.asarray(means, dtype=np.float64)
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    k, d = means.shape
    eye = gamma * np.eye(d)
    class_stats = [GaussianStats(means[i].copy(), eye.copy()) for i in range(k)]
    weights = uniform_weights(k)
    global_stats = merge_mixture(class_stats, weights)
    return SourceBank(class_stats, global_stats, weights, provenance="inferred")
