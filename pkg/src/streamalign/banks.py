"""Source and target statistic banks.

A *source bank* freezes per-class and global feature Gaussians of the
training distribution (either estimated from labeled data, or inferred from
the classifier weights alone). A *target bank* holds the streaming
counterparts that track the shifted test distribution as batches arrive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gaussian import (
    GaussianStats,
    MixtureWeights,
    RunningStats,
    uniform_weights,
)

__all__ = [
    "SourceBank",
    "TargetBank",
    "load_source_bank",
    "save_source_bank",
    "warm_start_target_bank",
    "cold_start_target_bank",
]

PROVENANCES = ("estimated", "inferred")


@dataclass
class SourceBank:
    """Frozen per-class and global Gaussians of the source feature space.

    ``provenance`` records how the anchors were obtained: ``"estimated"``
    (moments of labeled source features) or ``"inferred"`` (recovered from
    the classifier weights without any source data). Inferred class means
    are nonnegative by construction, matching rectified features.
    """

    class_stats: list[GaussianStats]
    global_stats: GaussianStats
    weights: MixtureWeights
    provenance: str

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        if len(self.class_stats) != len(self.weights):
            raise ValueError("one weight per class required")
        dims = {g.dim for g in self.class_stats} | {self.global_stats.dim}
        if len(dims) != 1:
            raise ValueError("class and global stats disagree on dimension")
        if self.provenance == "inferred":
            for k, g in enumerate(self.class_stats):
                if np.any(g.mean < 0):
                    raise ValueError(f"inferred mean for class {k} has negative entries")

    @property
    def n_classes(self) -> int:
        return len(self.class_stats)

    @property
    def dim(self) -> int:
        return self.global_stats.dim


@dataclass
class TargetBank:
    """Streaming per-class and global statistics of the test stream."""

    class_stats: list[RunningStats]
    global_stats: RunningStats
    weights: MixtureWeights

    def __post_init__(self):
        if len(self.class_stats) != len(self.weights):
            raise ValueError("one weight per class required")
        dims = {s.dim for s in self.class_stats} | {self.global_stats.dim}
        if len(dims) != 1:
            raise ValueError("class and global stats disagree on dimension")

    @property
    def n_classes(self) -> int:
        return len(self.class_stats)

    @property
    def dim(self) -> int:
        return self.global_stats.dim

    def copy(self) -> "TargetBank":
        return TargetBank(
            [s.copy() for s in self.class_stats],
            self.global_stats.copy(),
            MixtureWeights(self.weights.weights.copy()),
        )


def warm_start_target_bank(
    source: SourceBank, n_clip: int, n_clip_k: int
) -> TargetBank:
    """Target bank initialized at the source anchors.

    Counts start at the clip value so the very first updates already run at
    the clipped steady-state rate instead of overwriting the anchor with raw
    first-batch moments. Alignment losses are exactly zero until the stream
    moves the statistics.
    """
    per_class = [
        RunningStats(g.mean.copy(), g.cov.copy(), count=n_clip_k, clip=n_clip_k)
        for g in source.class_stats
    ]
    global_stats = RunningStats(
        source.global_stats.mean.copy(),
        source.global_stats.cov.copy(),
        count=n_clip,
        clip=n_clip,
    )
    return TargetBank(per_class, global_stats, MixtureWeights(source.weights.weights.copy()))


def cold_start_target_bank(
    dim: int, n_classes: int, n_clip: int, n_clip_k: int
) -> TargetBank:
    """Target bank starting from zero moments (first batch sets them)."""
    per_class = [RunningStats.zeros(dim, clip=n_clip_k) for _ in range(n_classes)]
    return TargetBank(
        per_class, RunningStats.zeros(dim, clip=n_clip), uniform_weights(n_classes)
    )


# ---------------------------------------------------------------------------
# Serialization. Covariances are stored as row-major nested lists; the format
# is documented in docs/formats.md.

_BANK_FORMAT_VERSION = 1


def save_source_bank(bank: SourceBank, path) -> None:
    payload = {
        "format_version": _BANK_FORMAT_VERSION,
        "dim": bank.dim,
        "n_classes": bank.n_classes,
        "provenance": bank.provenance,
        "weights": bank.weights.weights.tolist(),
        "classes": [
            {"mean": g.mean.tolist(), "cov": g.cov.tolist()} for g in bank.class_stats
        ],
        "global": {
            "mean": bank.global_stats.mean.tolist(),
            "cov": bank.global_stats.cov.tolist(),
        },
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_source_bank(path) -> SourceBank:
    with open(path) as fh:
        payload = json.load(fh)
    version = payload.get("format_version")
    if version != _BANK_FORMAT_VERSION:
        raise ValueError(f"unsupported source bank format version: {version}")
    classes = [
        GaussianStats(np.array(c["mean"]), np.array(c["cov"]))
        for c in payload["classes"]
    ]
    global_stats = GaussianStats(
        np.array(payload["global"]["mean"]), np.array(payload["global"]["cov"])
    )
    return SourceBank(
        classes,
        global_stats,
        MixtureWeights(np.array(payload["weights"], dtype=float)),
        payload["provenance"],
    )
