"""Adaptation objectives and their exact gradients.

Three terms drive test-time adaptation:

* **anchored clustering** ``L_ac``: sum over classes of the closed-form KL
  from the frozen source class Gaussian to the streaming target class
  Gaussian;
* **global alignment** ``L_ga``: the same KL between the global source and
  target feature Gaussians, fed by *every* sample (no filtering);
* **self-training** ``L_st``: confidence-gated cross-entropy of a strongly
  perturbed view against the pseudo-label taken from a weak view.

Gradients reach the features only through the current batch's additive
terms in the streaming moment update; the history (previous mean/cov and
count) is a constant. For a batch row ``z`` absorbed at clipped rate ``a``
into stats with post-update mean ``m'``, the chain rule gives

    dL/dz = a * dL/dm' + a * (G + G^T) (z - m'),    G = dL/dcov'.

The self-training gradient flows only through the strong branch; the weak
branch supplies labels and gates, which are locally constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .banks import SourceBank, TargetBank
from .filters import FilterDecision
from .gaussian import (
    GaussianStats,
    RunningStats,
    cholesky_psd,
    clipped_rate,
    gaussian_kl,
    regularize_cov,
    scale_eps,
)
from .network import ForwardTrace, Gradients, ModelParams, backward, forward

__all__ = [
    "AugmentationConfig",
    "LossBreakdown",
    "weak_view",
    "strong_view",
    "kl_to_target_grads",
    "anchored_clustering_loss",
    "global_alignment_loss",
    "self_training_core",
    "self_training_loss",
    "total_objective",
]

_LOG_FLOOR = 1e-12
_EPS_REL = 1e-5  # relative ridge used before every inverse/determinant


@dataclass
class AugmentationConfig:
    """Weak/strong view parameters.

    Weak: additive Gaussian noise with std ``sigma_weak``. Strong: zero out
    each coordinate independently with probability ``dropout_prob``, then add
    Gaussian noise with std ``sigma_strong``. The strong view must be the
    harsher one.
    """

    sigma_weak: float
    sigma_strong: float
    dropout_prob: float = 0.2

    def __post_init__(self):
        if self.sigma_weak < 0:
            raise ValueError("sigma_weak must be >= 0")
        if self.sigma_strong <= self.sigma_weak:
            raise ValueError("sigma_strong must exceed sigma_weak")
        if not 0.0 <= self.dropout_prob < 1.0:
            raise ValueError("dropout_prob must be in [0, 1)")

    @classmethod
    def from_input_std(
        cls, input_std: float, weak: float = 0.05, strong: float = 0.15,
        dropout_prob: float = 0.2,
    ) -> "AugmentationConfig":
        return cls(weak * input_std, strong * input_std, dropout_prob)


def weak_view(x: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    return x + rng.normal(0.0, aug.sigma_weak, size=x.shape)


def strong_view(x: np.ndarray, aug: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(x.shape) >= aug.dropout_prob
    return x * keep + rng.normal(0.0, aug.sigma_strong, size=x.shape)


@dataclass
class LossBreakdown:
    """Per-step objective components and gate counts."""

    l_ac: float
    l_ga: float
    l_st: float
    lambda1: float
    lambda2: float
    n_clustered: int = 0  # samples accepted into per-class cluster updates
    n_self_train: int = 0  # samples passing the self-training gate

    @property
    def total(self) -> float:
        return self.l_ac + self.lambda1 * self.l_ga + self.lambda2 * self.l_st

    def as_dict(self) -> dict:
        return {
            "l_ac": self.l_ac,
            "l_ga": self.l_ga,
            "l_st": self.l_st,
            "total": self.total,
            "n_clustered": self.n_clustered,
            "n_self_train": self.n_self_train,
        }


def kl_to_target_grads(
    source: GaussianStats,
    mean_t: np.ndarray,
    cov_t: np.ndarray,
    ridge_rel: float = _EPS_REL,
) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(source || target) plus gradients w.r.t. the *raw* target moments.

    Both covariances get the scale-aware ridge ``ridge_rel * trace / d``
    before any inverse or determinant; the returned covariance gradient
    includes the chain through the target-side ridge (its eps depends on
    trace(cov_t)). The source side is regularized identically but is a
    constant. ``ridge_rel`` defaults to the generic 1e-5; stream adapters
    run a heavier ridge because streaming per-class covariances of rectified
    features are routinely rank-deficient.
    """
    p_cov = regularize_cov(source.cov, scale_eps(source.cov, ridge_rel))
    q_cov = regularize_cov(cov_t, scale_eps(cov_t, ridge_rel))
    p = GaussianStats(source.mean, p_cov)
    q = GaussianStats(mean_t, q_cov)
    value = gaussian_kl(p, q)

    lq = cholesky_psd(q_cov)
    q_inv = cho_solve((lq, True), np.eye(q_cov.shape[0]))
    diff = mean_t - source.mean
    g_mean = q_inv @ diff
    q_inv_diff = g_mean  # same product
    g_cov_reg = 0.5 * (
        q_inv
        - np.outer(q_inv_diff, q_inv_diff)
        - q_inv @ p_cov @ q_inv
    )
    # ridge chain: d(cov + rel*tr(cov)/d * I) pulls in a trace term
    d = q_cov.shape[0]
    g_cov = g_cov_reg + (ridge_rel / d) * np.trace(g_cov_reg) * np.eye(d)
    return value, g_mean, g_cov


def _chain_to_rows(
    stats_post: RunningStats,
    rows: np.ndarray,
    g_mean: np.ndarray,
    g_cov: np.ndarray,
    stats_grad: str,
) -> np.ndarray:
    """Gradient w.r.t. the batch rows that produced ``stats_post``.

    Precondition: ``stats_post`` absorbed exactly ``rows`` in its latest
    update, so the clipped rate is recoverable from its count.
    """
    a = clipped_rate(stats_post.count, stats_post.clip)
    grad = np.tile(a * g_mean, (rows.shape[0], 1))
    if stats_grad == "full":
        sym = g_cov + g_cov.T
        grad += a * (rows - stats_post.mean) @ sym.T
    elif stats_grad != "mean_only":
        raise ValueError("stats_grad must be 'full' or 'mean_only'")
    return grad


def anchored_clustering_loss(
    source: SourceBank,
    target: TargetBank,
    features: np.ndarray,
    decisions: list[FilterDecision],
    stats_grad: str = "full",
    ridge_rel: float = _EPS_REL,
) -> tuple[float, np.ndarray]:
    """Sum over classes of KL(source class || target class), plus feature grads.

    Precondition: each target class's streaming stats were just updated with
    exactly the accepted rows of that class from ``features``. Classes with
    no accepted rows contribute loss value but no gradient. Returns
    ``(value, d_features)`` with one gradient row per feature row.
    """
    features = np.asarray(features, dtype=np.float64)
    if source.n_classes != target.n_classes:
        raise ValueError("source and target banks disagree on class count")
    d_features = np.zeros_like(features)
    members: list[list[int]] = [[] for _ in range(target.n_classes)]
    for i, dec in enumerate(decisions):
        if dec.accepted:
            members[dec.label].append(i)
    value = 0.0
    for k in range(target.n_classes):
        stats_k = target.class_stats[k]
        kl, g_mean, g_cov = kl_to_target_grads(
            source.class_stats[k], stats_k.mean, stats_k.cov, ridge_rel
        )
        value += kl
        if members[k]:
            idx = np.array(members[k])
            d_features[idx] += _chain_to_rows(
                stats_k, features[idx], g_mean, g_cov, stats_grad
            )
    return value, d_features


def global_alignment_loss(
    source_global: GaussianStats,
    target_global: RunningStats,
    features: np.ndarray,
    stats_grad: str = "full",
    mode: str = "kl",
    ridge_rel: float = _EPS_REL,
) -> tuple[float, np.ndarray]:
    """KL(source global || target global) with gradients for every feature row.

    Precondition: ``target_global`` was just updated with exactly
    ``features`` (all samples; no filtering on the global term).
    ``mode="l2"`` swaps in squared moment differences
    ``||mu_t - mu_s||^2 + ||cov_t - cov_s||_F^2`` as an ablation.
    """
    features = np.asarray(features, dtype=np.float64)
    if mode == "kl":
        value, g_mean, g_cov = kl_to_target_grads(
            source_global, target_global.mean, target_global.cov, ridge_rel
        )
    elif mode == "l2":
        dm = target_global.mean - source_global.mean
        dc = target_global.cov - source_global.cov
        value = float(dm @ dm + np.sum(dc * dc))
        g_mean, g_cov = 2.0 * dm, 2.0 * dc
    else:
        raise ValueError("mode must be 'kl' or 'l2'")
    d_features = _chain_to_rows(target_global, features, g_mean, g_cov, stats_grad)
    return value, d_features


def self_training_core(
    weak_posteriors: np.ndarray,
    strong_trace: ForwardTrace,
    tau_st: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Gated pseudo-label cross-entropy on the strong branch.

    loss = (1/n) sum_i 1[max_k q_weak[i, k] >= tau_st] * (-log q_strong[i, y_i])

    with ``y_i = argmax_k q_weak[i, k]``. The mean runs over the whole batch,
    gated-out samples included. Returns ``(value, d_strong_logits, gates,
    labels)``; the weak branch contributes no gradient.
    """
    q_weak = np.asarray(weak_posteriors, dtype=np.float64)
    q_strong = strong_trace.posteriors
    if q_weak.shape != q_strong.shape:
        raise ValueError("weak/strong posterior shape mismatch")
    n = q_weak.shape[0]
    labels = q_weak.argmax(axis=1)
    gates = q_weak.max(axis=1) >= tau_st
    picked = q_strong[np.arange(n), labels]
    per_sample = -np.log(np.maximum(picked, _LOG_FLOOR)) * gates
    value = float(per_sample.sum() / n)
    d_logits = q_strong.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits *= gates[:, None] / n
    return value, d_logits, gates, labels


def self_training_loss(
    params: ModelParams,
    inputs: np.ndarray,
    aug: AugmentationConfig,
    tau_st: float,
    rng: np.random.Generator,
) -> tuple[float, Gradients, int]:
    """Standalone self-training objective: samples both views itself.

    Returns ``(value, parameter_gradients, n_gated_in)``.
    """
    weak = weak_view(np.asarray(inputs, dtype=np.float64), aug, rng)
    strong = strong_view(np.asarray(inputs, dtype=np.float64), aug, rng)
    weak_trace = forward(params, weak)
    strong_trace = forward(params, strong)
    value, d_logits, gates, _ = self_training_core(
        weak_trace.posteriors, strong_trace, tau_st
    )
    grads = backward(params, strong_trace, d_logits=d_logits)
    return value, grads, int(gates.sum())


def total_objective(
    params: ModelParams,
    source: SourceBank,
    target: TargetBank,
    weak_trace: ForwardTrace,
    strong_trace: ForwardTrace | None,
    decisions: list[FilterDecision],
    lambda1: float = 1.0,
    lambda2: float = 10.0,
    stats_grad: str = "full",
    global_align: str = "kl",
    ridge_rel: float = _EPS_REL,
) -> tuple[LossBreakdown, Gradients]:
    """L_ac + lambda1 * L_ga + lambda2 * L_st with composed parameter grads.

    Preconditions as for the component losses: the target bank has already
    absorbed this minibatch (global stats with all rows, class stats with
    the accepted rows). ``strong_trace=None`` (or ``lambda2 == 0``) skips the
    self-training term entirely. Gradients superpose linearly: the weak
    branch carries the alignment feature gradients, the strong branch the
    scaled self-training logit gradients.
    """
    l_ac, d_feat = anchored_clustering_loss(
        source, target, weak_trace.features, decisions, stats_grad, ridge_rel
    )
    l_ga, d_feat_ga = global_alignment_loss(
        source.global_stats, target.global_stats, weak_trace.features,
        stats_grad, global_align, ridge_rel,
    )
    grads = backward(params, weak_trace, d_features=d_feat + lambda1 * d_feat_ga)

    l_st = 0.0
    n_st = 0
    if strong_trace is not None and lambda2 != 0.0:
        # gates and pseudo-labels come from the decisions the engine already
        # made on the weak posterior, not from a fresh threshold pass
        st_mask = np.array([d.st_pass for d in decisions], dtype=float)
        labels = np.array([d.label for d in decisions])
        n = strong_trace.posteriors.shape[0]
        picked = strong_trace.posteriors[np.arange(n), labels]
        l_st = float((-np.log(np.maximum(picked, _LOG_FLOOR)) * st_mask).sum() / n)
        d_logits = strong_trace.posteriors.copy()
        d_logits[np.arange(n), labels] -= 1.0
        d_logits *= st_mask[:, None] / n
        n_st = int(st_mask.sum())
        grads.add_(backward(params, strong_trace, d_logits=lambda2 * d_logits))

    breakdown = LossBreakdown(
        l_ac=l_ac,
        l_ga=l_ga,
        l_st=l_st,
        lambda1=lambda1,
        lambda2=lambda2,
        n_clustered=sum(1 for d in decisions if d.accepted),
        n_self_train=n_st,
    )
    return breakdown, grads
