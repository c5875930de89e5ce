"""Pseudo-label reliability filters for streaming cluster updates.

Each stream sample keeps an exponential moving average of its posterior
across revisits. Two cheap tests gate whether a sample's feature is allowed
to update its pseudo-class cluster:

* temporal consistency (TC): the current top-class probability must not have
  dropped more than a threshold below its smoothed history;
* posterior probability (PP): the smoothed posterior must be confident.

Fresh samples have no history (their EMA is initialized to the first
posterior), so TC passes trivially at the default threshold; PP is what
screens them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .banks import TargetBank
from .gaussian import running_update

__all__ = [
    "PosteriorEMA",
    "FilterDecision",
    "ema_update",
    "tc_filter",
    "pp_filter",
    "filtered_cluster_update",
]


def _check_posterior(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or q.size == 0:
        raise ValueError("posterior must be a non-empty 1-d vector")
    if np.any(q < -1e-9) or np.any(q > 1.0 + 1e-9):
        raise ValueError("posterior entries must lie in [0, 1]")
    if abs(float(q.sum()) - 1.0) > 1e-6:
        raise ValueError("posterior must sum to 1")
    return q


@dataclass
class PosteriorEMA:
    """Per-sample-id smoothed posteriors, owned by a single writer.

    ``xi`` is the update weight on the newest posterior. Entries for evicted
    sample ids should be dropped so memory stays bounded by the queue size.
    """

    xi: float = 0.9
    values: dict[int, np.ndarray] = field(default_factory=dict)
    steps: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.xi <= 1.0:
            raise ValueError("xi must be in (0, 1]")

    def get(self, sample_id: int) -> np.ndarray | None:
        return self.values.get(sample_id)

    def drop(self, sample_ids: Iterable[int]) -> None:
        for sid in sample_ids:
            self.values.pop(sid, None)
            self.steps.pop(sid, None)

    def __len__(self) -> int:
        return len(self.values)


def ema_update(state: PosteriorEMA, sample_id: int, q: np.ndarray) -> PosteriorEMA:
    """Fold posterior ``q`` into the sample's EMA (first sight initializes).

    smoothed' = (1 - xi) * smoothed + xi * q, with smoothed(0) = q.
    Mutates and returns ``state``.
    """
    q = _check_posterior(q)
    prev = state.values.get(sample_id)
    if prev is None:
        state.values[sample_id] = q.copy()
        state.steps[sample_id] = 1
    else:
        if prev.shape != q.shape:
            raise ValueError("posterior dimension changed for sample id")
        state.values[sample_id] = (1.0 - state.xi) * prev + state.xi * q
        state.steps[sample_id] += 1
    return state


def tc_filter(q: np.ndarray, ema_prev: np.ndarray, tau_diff: float) -> bool:
    """Temporal consistency: ``q[argmax q] - ema_prev[argmax q] > tau_diff``.

    ``tau_diff`` is a *difference* threshold (default -0.001 upstream); at
    -1.0 the test always passes, which disables the filter.
    """
    q = _check_posterior(q)
    ema_prev = _check_posterior(ema_prev)
    if q.shape != ema_prev.shape:
        raise ValueError("posterior dimension mismatch")
    top = int(np.argmax(q))
    return bool(q[top] - ema_prev[top] > tau_diff)


def pp_filter(ema: np.ndarray, tau_conf: float) -> bool:
    """Posterior probability: ``max_k ema[k] > tau_conf`` (confidence test)."""
    ema = _check_posterior(ema)
    return bool(float(ema.max()) > tau_conf)


@dataclass
class FilterDecision:
    """Outcome of the per-sample gates for one adaptation minibatch."""

    sample_id: int
    label: int  # pseudo-label (argmax of the weak-view posterior)
    tc_pass: bool
    pp_pass: bool
    st_pass: bool  # confidence gate for the self-training term

    @property
    def accepted(self) -> bool:
        """Allowed to update its pseudo-class cluster."""
        return self.tc_pass and self.pp_pass


def filtered_cluster_update(
    bank: TargetBank,
    features: np.ndarray,
    decisions: list[FilterDecision],
) -> tuple[TargetBank, np.ndarray]:
    """Update per-class streaming stats with the accepted samples only.

    Returns a new bank (input not mutated) and the per-class accepted
    counts. Classes with no accepted samples keep their statistics bitwise
    unchanged. The global statistics are untouched here; they absorb every
    sample and are updated by the caller.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(decisions):
        raise ValueError("features must be (n, d) with one row per decision")
    if features.shape[1] != bank.dim:
        raise ValueError(
            f"feature dim {features.shape[1]} does not match bank dim {bank.dim}"
        )
    k = bank.n_classes
    counts = np.zeros(k, dtype=int)
    members: list[list[int]] = [[] for _ in range(k)]
    for i, dec in enumerate(decisions):
        if not 0 <= dec.label < k:
            raise ValueError(f"pseudo-label {dec.label} out of range for {k} classes")
        if dec.accepted:
            members[dec.label].append(i)
    new_bank = bank.copy()
    for cls in range(k):
        if members[cls]:
            rows = features[members[cls]]
            new_bank.class_stats[cls] = running_update(bank.class_stats[cls], rows)
            counts[cls] = len(members[cls])
    return new_bank, counts
