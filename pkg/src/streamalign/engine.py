"""Streaming test-time adaptation driver.

Protocol names follow the two axes of the deployment contract:

* ``N-O`` (one-pass): each arriving batch is predicted *before* the model
  adapts on it, and evicted samples are never revisited. Predictions are
  causal: rerunning any stream prefix reproduces them bitwise.
* ``N-M`` (multi-pass): the whole target set may be swept several times;
  the reported predictions come from a final inference pass (or, optionally,
  from the last adaptation pass when ``interleave_inference`` is set).
* ``-SL`` uses source statistics estimated from labeled source features;
  ``-SF`` is source-free and requires statistics inferred from the
  classifier weights. Loading the wrong provenance is an error.

Per arriving batch the adapter keeps a FIFO queue of recent batches, runs
``n_itr`` shuffled epochs over it in minibatches, and for each minibatch:
takes a weak view, derives pseudo-labels and filter decisions, folds the
features into the global and (filtered) per-class streaming statistics, and
takes one SGD step on the combined alignment + self-training objective.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from .banks import (
    SourceBank,
    TargetBank,
    cold_start_target_bank,
    warm_start_target_bank,
)
from .filters import (
    FilterDecision,
    PosteriorEMA,
    ema_update,
    filtered_cluster_update,
    pp_filter,
    tc_filter,
)
from .gaussian import DecompositionError, running_update
from .losses import (
    AugmentationConfig,
    LossBreakdown,
    self_training_core,
    strong_view,
    total_objective,
    weak_view,
)
from .network import (
    ModelParams,
    NonFiniteGradientError,
    OptimizerState,
    backward,
    entropy_loss,
    forward,
    sgd_step,
)

__all__ = [
    "PROTOCOLS",
    "BASELINES",
    "ProtocolConfig",
    "Stream",
    "QueueState",
    "StreamReport",
    "load_stream",
    "save_stream",
    "run_stream",
    "run_baseline",
]

PROTOCOLS = ("N-O-SL", "N-O-SF", "N-M-SL", "N-M-SF")
BASELINES = ("TEST", "ENTROPY_MIN", "ST_ONLY")

# Config keys accepted from JSON config files (documented in docs/formats.md).
_CONFIG_KEYS = None  # filled in after the dataclass definition


@dataclass
class ProtocolConfig:
    """Everything that determines a run, so seeds make it reproducible."""

    protocol: str = "N-O-SL"
    n_b: int = 64  # arriving / adaptation minibatch size
    n_c: int = 512  # queue capacity in samples (one-pass only)
    n_itr: int = 4  # epochs over the queue per arriving batch (one-pass only)
    passes: int = 1  # sweeps over the target set (multi-pass only)
    interleave_inference: bool = False  # N-M: commit during the last sweep
    xi: float = 0.9  # posterior EMA weight on the newest observation
    tau_tc_diff: float = -0.001  # temporal-consistency difference threshold
    tau_pp_conf: float = 0.9  # smoothed-posterior confidence threshold
    tau_st: float = 0.9  # self-training confidence gate
    n_clip: int = 1280  # rate clip for the global streaming stats
    n_clip_k: int = 128  # rate clip for per-class streaming stats
    lambda1: float = 1.0  # weight of the global alignment term
    lambda2: float = 10.0  # weight of the self-training term
    lr: float = 0.001
    momentum: float = 0.9
    cov_ridge_rel: float = 0.05  # loss-path covariance ridge, x trace/d
    weight_decay: float = 0.0
    seed: int = 0
    sigma_weak: float | None = None  # None: 0.05 * std of the first batch
    sigma_strong: float | None = None  # None: 0.15 * std of the first batch
    dropout_prob: float = 0.2
    bank_init: str = "warm"  # "warm" (source anchors) or "cold" (zeros)
    use_filters: bool = True  # TC+PP gating of cluster updates
    stats_grad: str = "full"  # "full" or "mean_only" (covariance-path ablation)
    global_align: str = "kl"  # "kl" or "l2" (moment-matching ablation)
    entropy_scope: str = "head"  # ENTROPY_MIN update scope: "head" or "all"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; use one of {PROTOCOLS}")
        if self.n_b < 1 or self.n_c < self.n_b:
            raise ValueError("need n_b >= 1 and n_c >= n_b")
        if self.n_itr < 1 or self.passes < 1:
            raise ValueError("n_itr and passes must be >= 1")
        if self.one_pass and self.passes != 1:
            raise ValueError("one-pass protocols take exactly one pass")
        if self.bank_init not in ("warm", "cold"):
            raise ValueError("bank_init must be 'warm' or 'cold'")

    @property
    def one_pass(self) -> bool:
        return self.protocol.startswith("N-O")

    @property
    def source_free(self) -> bool:
        return self.protocol.endswith("SF")

    @classmethod
    def from_dict(cls, d: dict) -> "ProtocolConfig":
        unknown = set(d) - _CONFIG_KEYS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "ProtocolConfig":
        d = self.to_dict()
        d.update(kw)
        return ProtocolConfig(**d)


_CONFIG_KEYS = {f.name for f in fields(ProtocolConfig)}


@dataclass
class Stream:
    """Target inputs in arrival order; labels ride along for evaluation only."""

    x: np.ndarray
    y: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError("stream inputs must be (n, dim)")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (self.x.shape[0],):
                raise ValueError("labels must be (n,)")

    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    def batches(self, n_b: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray | None]]:
        for start in range(0, self.n_samples, n_b):
            stop = min(start + n_b, self.n_samples)
            ids = np.arange(start, stop)
            yield ids, self.x[start:stop], None if self.y is None else self.y[start:stop]

    def shuffled(self, seed: int) -> "Stream":
        order = np.random.default_rng(seed).permutation(self.n_samples)
        return Stream(self.x[order], None if self.y is None else self.y[order])


def save_stream(stream: Stream, path) -> None:
    if stream.y is None:
        np.savez(path, x=stream.x)
    else:
        np.savez(path, x=stream.x, y=stream.y)


def load_stream(path) -> Stream:
    with np.load(path) as data:
        x = data["x"]
        y = data["y"] if "y" in data else None
    return Stream(x, y)


class QueueState:
    """Fixed-capacity FIFO of recent arrival batches.

    Capacity is in samples; eviction happens in whole arrival-batch units,
    oldest first. ``push`` returns the evicted sample ids so per-sample
    state (posterior EMAs) can be dropped with them.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._batches: deque[tuple[np.ndarray, np.ndarray]] = deque()
        self._size = 0

    @property
    def size(self) -> int:
        return self._size

    def push(self, ids: np.ndarray, xs: np.ndarray) -> list[int]:
        evicted: list[int] = []
        while self._batches and self._size + len(ids) > self.capacity:
            old_ids, _ = self._batches.popleft()
            self._size -= len(old_ids)
            evicted.extend(int(i) for i in old_ids)
        self._batches.append((ids, xs))
        self._size += len(ids)
        return evicted

    def samples(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.concatenate([b[0] for b in self._batches])
        xs = np.concatenate([b[1] for b in self._batches])
        return ids, xs


@dataclass
class StreamReport:
    """Everything a run produces. Committed predictions are append-only.

    ``wall_times`` is diagnostic only and excluded from reproducibility
    comparisons (see :meth:`comparable_dict`).
    """

    protocol: str
    method: str
    seed: int
    predictions: list[int] = field(default_factory=list)
    labels: list[int] | None = None
    losses: list[dict] = field(default_factory=list)
    acceptance: list[dict] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)
    skipped_steps: int = 0
    config: dict = field(default_factory=dict)

    def commit(self, preds: np.ndarray, labels: np.ndarray | None) -> None:
        self.predictions.extend(int(p) for p in preds)
        if labels is not None:
            if self.labels is None:
                self.labels = []
            self.labels.extend(int(y) for y in labels)

    def cumulative_error(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("stream carried no labels")
        wrong = np.array(self.predictions) != np.array(self.labels)
        return np.cumsum(wrong) / np.arange(1, len(wrong) + 1)

    def final_error(self) -> float:
        return float(self.cumulative_error()[-1])

    def to_dict(self) -> dict:
        d = self.comparable_dict()
        d["wall_times"] = self.wall_times
        return d

    def comparable_dict(self) -> dict:
        """Deterministic subset: equal for reruns with identical config+seed."""
        return {
            "protocol": self.protocol,
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "predictions": self.predictions,
            "labels": self.labels,
            "losses": self.losses,
            "acceptance": self.acceptance,
            "skipped_steps": self.skipped_steps,
            "final_error": self.final_error() if self.labels else None,
        }


class _Session:
    """Single-writer adaptation state: one model, one bank, one RNG."""

    def __init__(
        self,
        cfg: ProtocolConfig,
        params: ModelParams,
        method: str,
        source: SourceBank | None,
    ):
        self.cfg = cfg
        self.method = method
        self.rng = np.random.default_rng(cfg.seed)
        self.params = params.copy()
        self.opt = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
        self.source = source
        self.bank: TargetBank | None = None
        if method == "full":
            assert source is not None
            if cfg.bank_init == "warm":
                self.bank = warm_start_target_bank(source, cfg.n_clip, cfg.n_clip_k)
            else:
                self.bank = cold_start_target_bank(
                    source.dim, source.n_classes, cfg.n_clip, cfg.n_clip_k
                )
        self.ema = PosteriorEMA(cfg.xi)
        # Multi-pass sweeps touch every batch once per pass; the recency queue
        # and inner epochs only exist under one-pass adaptation.
        if cfg.one_pass:
            self.queue = QueueState(cfg.n_c)
            self.n_itr = cfg.n_itr
        else:
            self.queue = QueueState(cfg.n_b)
            self.n_itr = 1
        self.aug: AugmentationConfig | None = None
        self.arrival = 0  # index of the arriving batch, for report rows
        self.report = StreamReport(
            protocol=cfg.protocol, method=method, seed=cfg.seed, config=cfg.to_dict()
        )

    # -- inference ---------------------------------------------------------

    def predict_and_commit(self, xs: np.ndarray, ys: np.ndarray | None) -> np.ndarray:
        """Committed predictions on the raw inputs with the current model."""
        preds = forward(self.params, xs).posteriors.argmax(axis=1)
        self.report.commit(preds, ys)
        return preds

    # -- adaptation --------------------------------------------------------

    def _ensure_aug(self, xs: np.ndarray) -> None:
        if self.aug is not None or self.method in ("test", "entropy"):
            return
        if self.cfg.sigma_weak is not None and self.cfg.sigma_strong is not None:
            self.aug = AugmentationConfig(
                self.cfg.sigma_weak, self.cfg.sigma_strong, self.cfg.dropout_prob
            )
        else:
            # scale reference: std of the first arriving batch (causal)
            std = max(float(xs.std()), 1e-6)
            self.aug = AugmentationConfig.from_input_std(
                std, dropout_prob=self.cfg.dropout_prob
            )

    def sttt_step(self, ids: np.ndarray, xs: np.ndarray) -> None:
        """Enqueue the arriving batch, then adapt over the queue."""
        if self.method == "test":
            return
        self._ensure_aug(xs)
        evicted = self.queue.push(ids, xs)
        self.ema.drop(evicted)
        for _ in range(self.n_itr):
            all_ids, all_x = self.queue.samples()
            order = self.rng.permutation(len(all_ids))
            for start in range(0, len(order), self.cfg.n_b):
                take = order[start : start + self.cfg.n_b]
                self._adapt_minibatch(all_ids[take], all_x[take])
        self.arrival += 1

    def _decide(self, ids: np.ndarray, posteriors: np.ndarray) -> list[FilterDecision]:
        cfg = self.cfg
        decisions = []
        for i, sid in enumerate(ids):
            q = posteriors[i]
            label = int(np.argmax(q))
            prev = self.ema.get(int(sid))
            if cfg.use_filters:
                # temporal consistency compares against the EMA *before* this
                # observation; a first sighting compares q with itself
                tc = tc_filter(q, prev if prev is not None else q, cfg.tau_tc_diff)
            else:
                tc = True
            ema_update(self.ema, int(sid), q)
            if cfg.use_filters:
                pp = pp_filter(self.ema.values[int(sid)], cfg.tau_pp_conf)
            else:
                pp = True
            st = bool(q.max() >= cfg.tau_st)
            decisions.append(FilterDecision(int(sid), label, tc, pp, st))
        return decisions

    def _record(self, breakdown: LossBreakdown, decisions: list[FilterDecision]) -> None:
        n = max(len(decisions), 1)
        self.report.losses.append({"arrival": self.arrival, **breakdown.as_dict()})
        self.report.acceptance.append(
            {
                "arrival": self.arrival,
                "tc_rate": sum(d.tc_pass for d in decisions) / n,
                "pp_rate": sum(d.pp_pass for d in decisions) / n,
                "accept_rate": sum(d.accepted for d in decisions) / n,
                "st_rate": sum(d.st_pass for d in decisions) / n,
            }
        )

    def _apply(self, grads) -> None:
        try:
            self.params, self.opt = sgd_step(self.params, grads, self.opt)
        except NonFiniteGradientError:
            self.report.skipped_steps += 1

    def _adapt_minibatch(self, ids: np.ndarray, xs: np.ndarray) -> None:
        cfg = self.cfg
        if self.method == "entropy":
            trace = forward(self.params, xs)
            value, d_logits = entropy_loss(trace)
            if not np.isfinite(value):
                self.report.skipped_steps += 1
                return
            grads = backward(self.params, trace, d_logits=d_logits)
            if cfg.entropy_scope == "head":
                # freeze everything below the last backbone layer
                for layer in grads.layers[:-1]:
                    layer.weight[:] = 0.0
                    layer.bias[:] = 0.0
            self._apply(grads)
            self.report.losses.append({"arrival": self.arrival, "entropy": value})
            return

        weak = weak_view(xs, self.aug, self.rng)
        weak_trace = forward(self.params, weak)

        if self.method == "st_only":
            strong = strong_view(xs, self.aug, self.rng)
            strong_trace = forward(self.params, strong)
            value, d_logits, gates, _ = self_training_core(
                weak_trace.posteriors, strong_trace, cfg.tau_st
            )
            if not np.isfinite(value):
                self.report.skipped_steps += 1
                return
            grads = backward(self.params, strong_trace, d_logits=cfg.lambda2 * d_logits)
            self._apply(grads)
            self.report.losses.append(
                {
                    "arrival": self.arrival,
                    "l_st": value,
                    "total": cfg.lambda2 * value,
                    "n_self_train": int(gates.sum()),
                }
            )
            return

        # full objective: filters, bank updates, then the combined loss
        decisions = self._decide(ids, weak_trace.posteriors)
        self.bank.global_stats = running_update(
            self.bank.global_stats, weak_trace.features
        )
        self.bank, _counts = filtered_cluster_update(
            self.bank, weak_trace.features, decisions
        )
        strong_trace = None
        if cfg.lambda2 != 0.0:
            strong = strong_view(xs, self.aug, self.rng)
            strong_trace = forward(self.params, strong)
        try:
            breakdown, grads = total_objective(
                self.params,
                self.source,
                self.bank,
                weak_trace,
                strong_trace,
                decisions,
                cfg.lambda1,
                cfg.lambda2,
                cfg.stats_grad,
                cfg.global_align,
                cfg.cov_ridge_rel,
            )
        except DecompositionError:
            self.report.skipped_steps += 1
            return
        if not np.isfinite(breakdown.total):
            self.report.skipped_steps += 1
            self._record(breakdown, decisions)
            return
        self._apply(grads)
        self._record(breakdown, decisions)


def _check_provenance(cfg: ProtocolConfig, source: SourceBank) -> None:
    if cfg.source_free and source.provenance != "inferred":
        raise ValueError(
            f"{cfg.protocol} is source-free and requires inferred source "
            f"statistics, got provenance {source.provenance!r}"
        )
    if not cfg.source_free and source.provenance != "estimated":
        raise ValueError(
            f"{cfg.protocol} expects estimated source statistics, got "
            f"provenance {source.provenance!r}"
        )


def _drive(session: _Session, stream: Stream) -> StreamReport:
    cfg = session.cfg
    if cfg.one_pass:
        for ids, xs, ys in stream.batches(cfg.n_b):
            t0 = time.perf_counter()
            session.predict_and_commit(xs, ys)
            session.sttt_step(ids, xs)
            session.report.wall_times.append(time.perf_counter() - t0)
    else:
        for p in range(cfg.passes):
            commit = cfg.interleave_inference and p == cfg.passes - 1
            for ids, xs, ys in stream.batches(cfg.n_b):
                t0 = time.perf_counter()
                if commit:
                    session.predict_and_commit(xs, ys)
                session.sttt_step(ids, xs)
                session.report.wall_times.append(time.perf_counter() - t0)
        if not cfg.interleave_inference:
            for _ids, xs, ys in stream.batches(cfg.n_b):
                session.predict_and_commit(xs, ys)
    return session.report


def run_stream(
    cfg: ProtocolConfig,
    source: SourceBank,
    params: ModelParams,
    stream: Stream,
    method: str = "full",
) -> StreamReport:
    """Adapt on the stream under the configured protocol; returns the report.

    ``method`` is a report label; the objective itself is shaped by the
    config (``lambda2=0`` drops self-training, ``use_filters=False`` lets
    every sample update its pseudo-class cluster, and so on).
    """
    _check_provenance(cfg, source)
    if source.dim != params.feature_dim or source.n_classes != params.n_classes:
        raise ValueError("source bank and model disagree on feature dim or classes")
    session = _Session(cfg, params, "full", source)
    session.report.method = method
    return _drive(session, stream)


def run_baseline(
    kind: str,
    cfg: ProtocolConfig,
    params: ModelParams,
    stream: Stream,
) -> StreamReport:
    """Reference adapters sharing the causal driver.

    ``TEST`` never adapts; ``ENTROPY_MIN`` minimizes prediction entropy
    (head-only updates by default); ``ST_ONLY`` keeps just the weak/strong
    self-training term, with no statistics involved.
    """
    if kind not in BASELINES:
        raise ValueError(f"unknown baseline {kind!r}; use one of {BASELINES}")
    method = {"TEST": "test", "ENTROPY_MIN": "entropy", "ST_ONLY": "st_only"}[kind]
    session = _Session(cfg, params, method, source=None)
    return _drive(session, stream)
