"""Synthetic shifted-domain benchmark for the adaptation engine.

A domain is a Gaussian-blob classification problem: class means sit on
random directions at a controlled separation, and the *target* split is
pushed through a severity-scaled corruption (fixed shift, per-coordinate
log-scaling, a rotation, and per-sample noise). Severity scales every
corruption magnitude linearly, with severity 0 the identity and severity 3
the nominal setting, so a frozen source model degrades monotonically and an
adapter has structure to recover.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import expm

from .banks import SourceBank
from .engine import (
    ProtocolConfig,
    Stream,
    StreamReport,
    run_baseline,
    run_stream,
)
from .gaussian import batch_moments
from .network import (
    ModelParams,
    OptimizerState,
    backward,
    cross_entropy_loss,
    forward,
    init_mlp,
    sgd_step,
)
from .source import (
    InferenceConfig,
    build_inferred_bank,
    choose_gamma,
    estimate_source_stats,
    infer_source_means,
)

__all__ = [
    "DomainSpec",
    "DomainData",
    "TrainConfig",
    "generate_domain",
    "train_source",
    "prepare_source",
    "run_cell",
    "run_grid",
    "default_grid",
    "METHODS",
]

METHODS = ("full", "anchored", "st_only", "entropy", "test")


@dataclass
class DomainSpec:
    """Synthetic domain: blob geometry plus corruption magnitudes."""

    dim: int = 16
    n_classes: int = 8
    train_per_class: int = 500
    val_per_class: int = 100
    target_samples: int = 2000
    class_scale: float = 4.0  # distance of class means from the origin
    within_std: float = 1.0  # isotropic blob std
    shift_scale: float = 4.0  # length of the fixed corruption shift at severity 3
    scale_log_range: float = 0.7  # per-coordinate log-scale range at severity 3
    rotation_angle: float = 1.0  # generator norm of the rotation at severity 3
    noise_std: float = 0.6  # per-sample additive noise std at severity 3
    severity: int = 3  # 0..5; scales all magnitudes by severity / 3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.severity <= 5:
            raise ValueError("severity must be in 0..5")
        if self.dim < 2 or self.n_classes < 2:
            raise ValueError("need dim >= 2 and n_classes >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown domain keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DomainData:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    stream: Stream
    spec: DomainSpec
    input_std: float = field(default=1.0)


def _class_means(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    # random orthonormal directions (QR of a Gaussian draw) keep every pair
    # of class means exactly sqrt(2) * class_scale apart when K <= dim, so
    # source separability is controlled by class_scale alone
    raw = rng.normal(size=(spec.dim, spec.dim))
    q, _ = np.linalg.qr(raw)
    if spec.n_classes <= spec.dim:
        dirs = q[: spec.n_classes]
    else:
        dirs = rng.normal(size=(spec.n_classes, spec.dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return spec.class_scale * dirs


def _sample_blobs(
    means: np.ndarray, per_class: np.ndarray, std: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for k, n in enumerate(per_class):
        xs.append(means[k] + rng.normal(0.0, std, size=(n, means.shape[1])))
        ys.append(np.full(n, k, dtype=np.int64))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    return x, y


def _corruption_operators(
    spec: DomainSpec, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed (seeded) shift direction, log-scales, and rotation generator."""
    shift_dir = rng.normal(size=spec.dim)
    shift_dir /= np.linalg.norm(shift_dir)
    log_scales = rng.uniform(-spec.scale_log_range, spec.scale_log_range, size=spec.dim)
    skew = rng.normal(size=(spec.dim, spec.dim))
    skew = skew - skew.T
    skew /= np.linalg.norm(skew, 2)
    return shift_dir, log_scales, skew


def corrupt(
    x: np.ndarray, spec: DomainSpec, rng: np.random.Generator
) -> np.ndarray:
    """Apply the severity-scaled corruption. Severity 0 returns x unchanged."""
    m = spec.severity / 3.0
    if m == 0.0:
        return x.copy()
    op_rng = np.random.default_rng(spec.seed + 7919)  # operators fixed per domain
    shift_dir, log_scales, skew = _corruption_operators(spec, op_rng)
    rot = expm(m * spec.rotation_angle * skew)
    out = (x * np.exp(m * log_scales)) @ rot.T
    out = out + m * spec.shift_scale * shift_dir
    out = out + rng.normal(0.0, m * spec.noise_std, size=x.shape)
    return out


def generate_domain(spec: DomainSpec) -> DomainData:
    """Labeled source train/val splits plus the corrupted target stream.

    The target stream is drawn from the same class blobs, corrupted, and
    shuffled (seeded). Everything is a pure function of the spec.
    """
    rng = np.random.default_rng(spec.seed)
    means = _class_means(spec, rng)
    train_x, train_y = _sample_blobs(
        means, np.full(spec.n_classes, spec.train_per_class), spec.within_std, rng
    )
    val_x, val_y = _sample_blobs(
        means, np.full(spec.n_classes, spec.val_per_class), spec.within_std, rng
    )
    # target: as-even-as-possible class counts summing to target_samples
    base = spec.target_samples // spec.n_classes
    counts = np.full(spec.n_classes, base)
    counts[: spec.target_samples - base * spec.n_classes] += 1
    tgt_x, tgt_y = _sample_blobs(means, counts, spec.within_std, rng)
    tgt_x = corrupt(tgt_x, spec, rng)
    order = rng.permutation(tgt_x.shape[0])
    stream = Stream(tgt_x[order], tgt_y[order])
    return DomainData(
        train_x, train_y, val_x, val_y, stream, spec,
        input_std=float(train_x.std()),
    )


@dataclass
class TrainConfig:
    hidden: tuple[int, ...] = (64, 64)
    feature_dim: int = 16
    epochs: int = 30
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    min_val_accuracy: float = 0.80
    target_val_accuracy: float = 0.95


def accuracy(params: ModelParams, x: np.ndarray, y: np.ndarray) -> float:
    preds = forward(params, x).posteriors.argmax(axis=1)
    return float((preds == y).mean())


def train_source(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    cfg: TrainConfig | None = None,
) -> tuple[ModelParams, list[dict]]:
    """Fit the source classifier with plain SGD cross-entropy.

    Stops early once validation accuracy reaches the target; raises if the
    final model can't clear the minimum (the downstream comparisons would be
    meaningless on a broken source model).
    """
    if cfg is None:
        cfg = TrainConfig()
    rng = np.random.default_rng(cfg.seed)
    n_classes = int(train_y.max()) + 1
    params = init_mlp(rng, train_x.shape[1], cfg.hidden, cfg.feature_dim, n_classes)
    opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
    history = []
    n = train_x.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            take = order[start : start + cfg.batch_size]
            trace = forward(params, train_x[take])
            loss, d_logits = cross_entropy_loss(trace, train_y[take])
            grads = backward(params, trace, d_logits=d_logits)
            params, opt = sgd_step(params, grads, opt)
            epoch_loss += loss * len(take)
        val_acc = accuracy(params, val_x, val_y)
        history.append({"epoch": epoch, "loss": epoch_loss / n, "val_accuracy": val_acc})
        if val_acc >= cfg.target_val_accuracy and epoch >= 2:
            break
    final_acc = history[-1]["val_accuracy"]
    if final_acc < cfg.min_val_accuracy:
        raise RuntimeError(
            f"source training reached only {final_acc:.1%} validation accuracy "
            f"(need {cfg.min_val_accuracy:.0%}); domain or model config is off"
        )
    return params, history


def prepare_source(
    train_x: np.ndarray,
    train_y: np.ndarray,
    params: ModelParams,
    source_free: bool,
    seed: int = 0,
) -> SourceBank:
    """Source bank for a protocol: estimated from features, or inferred.

    Source-free preparation never touches the data arguments (they may be
    None); it works from the classifier weights alone.
    """
    if source_free:
        result = infer_source_means(params.classifier, InferenceConfig(seed=seed))
        gamma = choose_gamma(result.means)
        return build_inferred_bank(result.means, gamma)
    feats = forward(params, train_x).features
    return estimate_source_stats(feats, train_y)


# ---------------------------------------------------------------------------
# Experiment grid


def _cell_key(cell: dict) -> str:
    canon = json.dumps(cell, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def run_cell(
    cell: dict,
    domain_cache: dict | None = None,
) -> dict:
    """Run one grid cell: a (method, protocol, domain) triple over seeds.

    Cell keys: ``method`` (one of METHODS), ``protocol``, ``domain`` (spec
    dict), ``seeds`` (list), optional ``config`` overrides and ``name``.
    Domains and trained source models are cached across cells by their spec.
    By default each seed reshuffles the stream order *and* reseeds the
    engine; ``vary: "shuffle"`` keeps the engine seed fixed and varies only
    the streaming order (for order-sensitivity measurements). The domain and
    source model stay fixed either way.
    """
    method = cell.get("method", "full")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; use one of {METHODS}")
    protocol = cell.get("protocol", "N-O-SL")
    spec = DomainSpec.from_dict(cell.get("domain", {}))
    seeds = list(cell.get("seeds", [0]))
    overrides = dict(cell.get("config", {}))
    vary = cell.get("vary", "seed")
    if vary not in ("seed", "shuffle"):
        raise ValueError(f"vary must be 'seed' or 'shuffle', got {vary!r}")

    cache = domain_cache if domain_cache is not None else {}
    domain_key = json.dumps(spec.to_dict(), sort_keys=True)
    if domain_key not in cache:
        data = generate_domain(spec)
        params, history = train_source(data.train_x, data.train_y, data.val_x, data.val_y)
        cache[domain_key] = (data, params, history)
    data, params, _history = cache[domain_key]

    source_key = (domain_key, protocol.endswith("SF"))
    if source_key not in cache:
        cache[source_key] = prepare_source(
            data.train_x, data.train_y, params, protocol.endswith("SF")
        )
    source = cache[source_key]

    base_cfg = {
        "protocol": protocol,
        "sigma_weak": 0.05 * data.input_std,
        "sigma_strong": 0.15 * data.input_std,
    }
    if protocol.endswith("SF"):
        # inferred anchors are isotropic and much tighter than the real
        # within-class spread; driving the covariance path against them
        # over-contracts the clusters, so align means only
        base_cfg["stats_grad"] = "mean_only"
    base_cfg.update(overrides)
    if method == "anchored":
        base_cfg["lambda2"] = 0.0

    errors, reports = [], []
    for seed in seeds:
        cfg_dict = dict(base_cfg)
        if vary == "seed":
            cfg_dict["seed"] = seed
        cfg = ProtocolConfig.from_dict(cfg_dict)
        stream = data.stream.shuffled(seed)
        if method in ("full", "anchored"):
            report = run_stream(cfg, source, params, stream, method=method)
        else:
            kind = {"test": "TEST", "entropy": "ENTROPY_MIN", "st_only": "ST_ONLY"}[method]
            report = run_baseline(kind, cfg, params, stream)
        errors.append(report.final_error())
        reports.append(report)

    errors_arr = np.array(errors)
    accept = [row["accept_rate"] for r in reports for row in r.acceptance]
    return {
        "name": cell.get("name", f"{method}-{protocol}-s{spec.severity}"),
        "key": _cell_key(cell),
        "method": method,
        "protocol": protocol,
        "severity": spec.severity,
        "seeds": seeds,
        "errors": errors,
        "error_mean": float(errors_arr.mean()),
        "error_std": float(errors_arr.std()),
        "error_median": float(np.median(errors_arr)),
        "accept_rate_mean": float(np.mean(accept)) if accept else None,
        "reports": reports,
    }


# Per-cell tuning for the default comparison grid. The adapters differ in
# how aggressively they can self-train before confirmation bias bites, so
# lambda2 / lr are set per cell (the stability/accuracy sweet spot moves
# with the anchor quality and the number of visits per sample):
#   - one-pass full runs take a small self-training weight; large ones are
#     unstable across stream orders here,
#   - source-free runs see crude inferred anchors and need a faster lr to
#     close the gap within one pass,
#   - multi-pass runs revisit every sample, so they tolerate a heavier
#     self-training weight with the faster lr.
_FULL_TUNED = {"lambda2": 1.0, "lr": 0.001, "tau_tc_diff": -0.003}
_SF_TUNED = {"lambda2": 1.0, "lr": 0.003}
_NM_TUNED = {"lambda2": 3.0, "lr": 0.003, "tau_tc_diff": -0.003, "passes": 3}


def default_grid(seeds: list[int] | None = None) -> dict:
    """The default comparison grid: tuned method + ablation cells.

    One shared domain (severity 3), five seeds per cell. The cells cover the
    frozen-model floor, entropy and self-training baselines, the anchored-
    only ablation, the full adapter in one-pass / source-free / multi-pass
    protocols, and filter ablations of the full adapter.
    """
    if seeds is None:
        seeds = [0, 1, 2, 3, 4]
    domain = DomainSpec().to_dict()

    def cell(name, method="full", protocol="N-O-SL", config=None):
        return {
            "name": name,
            "method": method,
            "protocol": protocol,
            "domain": domain,
            "seeds": list(seeds),
            "config": dict(config or {}),
        }

    return {
        "name": "default-comparison",
        "cells": [
            cell("test", method="test"),
            cell("entropy", method="entropy"),
            cell("st-only", method="st_only"),
            cell("anchored-only", method="anchored",
                 config={k: v for k, v in _FULL_TUNED.items() if k != "lambda2"}),
            cell("full", config=_FULL_TUNED),
            cell("full-source-free", protocol="N-O-SF", config=_SF_TUNED),
            cell("full-multipass", protocol="N-M-SL", config=_NM_TUNED),
            cell("full-no-filters", config={**_FULL_TUNED, "use_filters": False}),
            cell("full-no-tc", config={**_FULL_TUNED, "tau_tc_diff": -1.0}),
        ],
    }


def run_grid(grid: dict) -> list[dict]:
    """Run every cell in a grid spec; returns one result row per cell.

    A cell that raises is recorded as a failure row (``status: "failed"``
    with the exception text) and the remaining cells still run.
    """
    cells = grid.get("cells")
    if not cells:
        raise ValueError("grid has no cells")
    cache: dict = {}
    rows = []
    for idx, cell in enumerate(cells):
        try:
            row = run_cell(cell, cache)
            row["status"] = "ok"
        except Exception as exc:  # noqa: BLE001 - record and move on
            try:
                key = _cell_key(cell)
            except TypeError:
                key = "invalid"
            domain = cell.get("domain")
            severity = domain.get("severity", 3) if isinstance(domain, dict) else None
            row = {
                "name": cell.get("name", f"cell-{idx}"),
                "key": key,
                "method": cell.get("method", "full"),
                "protocol": cell.get("protocol", "N-O-SL"),
                "severity": severity,
                "status": "failed",
                "message": f"{type(exc).__name__}: {exc}",
            }
        rows.append(row)
    return rows
