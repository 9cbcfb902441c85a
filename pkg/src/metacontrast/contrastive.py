"""Noise-contrastive loss over cross-view embedding pairs.

Scores stay in the log domain throughout: a pair's log-score is its
cosine similarity over temperature, and the loss is
log-sum-exp(all log-scores) minus the positive's log-score. Exponentials
of raw scores are never materialised.
"""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad
from .synth import VIEW_RES, VIEW_RGB

__all__ = ["ContrastiveConfig", "FeatureBank", "score", "nce_loss", "select_negatives"]


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature, negative count, and where negatives come from.

    ``k`` zero means "all eligible" (the B-1 opposite-view embeddings of
    an in-batch bank). ``bank_mode`` is either "in-batch" (negatives are
    live graph nodes from the current batch, gradients flow into them) or
    "persistent" (negatives are detached, possibly stale entries kept
    across iterations).
    """

    tau: float = 0.1
    k: int = 0
    bank_mode: str = "in-batch"

    def __post_init__(self) -> None:
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")
        if self.bank_mode not in ("in-batch", "persistent"):
            raise ValueError(f"unknown bank_mode {self.bank_mode!r}")


def score(z1: ad.Node, z2: ad.Node, tau: float) -> ad.Node:
    """Log-domain pair score: dot(z1, z2) / tau on unit vectors."""
    if tau <= 0.0:
        raise ValueError(f"tau must be positive, got {tau}")
    z1, z2 = ad.as_node(z1), ad.as_node(z2)
    if z1.shape != z2.shape or z1.values.ndim != 1:
        raise ValueError(f"score: need two equal-length vectors, got {z1.shape} and {z2.shape}")
    for side, z in (("first", z1), ("second", z2)):
        if float(np.linalg.norm(z.values)) == 0.0:
            raise ValueError(f"score: {side} vector is zero, cosine undefined")
    return ad.mul(ad.reduce_sum(ad.mul(z1, z2)), 1.0 / tau)


def nce_loss(anchor: ad.Node, positive: ad.Node, negatives: Sequence[ad.Node],
             tau: float) -> ad.Node:
    """Contrastive loss for one anchor against its positive and negatives.

    Equals -log of the positive's softmax weight among
    {positive} union negatives, computed as
    logsumexp(log-scores) - log-score(positive).
    """
    negatives = list(negatives)
    if not negatives:
        raise ValueError("nce_loss: need at least one negative")
    positive_score = score(anchor, positive, tau)
    all_scores = [positive_score] + [score(anchor, negative, tau) for negative in negatives]
    return ad.sub(ad.logsumexp(ad.stack(all_scores), axis=0), positive_score)


class FeatureBank:
    """Embeddings available as negatives, keyed by (clip_id, view_tag).

    At most one entry per key; re-adding replaces the stale entry and
    refreshes its age. When the bank exceeds capacity the oldest entries
    are dropped. An in-batch bank is rebuilt each iteration from live
    graph nodes; a persistent bank receives detached nodes and is only
    mutated between stages.
    """

    def __init__(self, capacity: int = 512):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: dict[tuple[int, str], ad.Node] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def keys(self) -> list[tuple[int, str]]:
        return list(self._entries)

    def add(self, clip_id: int, view_tag: str, embedding: ad.Node) -> None:
        if view_tag not in (VIEW_RGB, VIEW_RES):
            raise ValueError(f"unknown view tag {view_tag!r}")
        embedding = ad.as_node(embedding)
        norm = float(np.linalg.norm(embedding.values))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"bank entries must be unit-norm, got norm {norm!r}")
        key = (int(clip_id), view_tag)
        self._entries.pop(key, None)
        self._entries[key] = embedding
        while len(self._entries) > self.capacity:
            oldest = next(iter(self._entries))
            del self._entries[oldest]

    def eligible(self, anchor_clip_id: int, anchor_view_tag: str) -> list[tuple[int, ad.Node]]:
        """Opposite-view entries from other clips, in insertion order."""
        if anchor_view_tag not in (VIEW_RGB, VIEW_RES):
            raise ValueError(f"unknown view tag {anchor_view_tag!r}")
        opposite = VIEW_RES if anchor_view_tag == VIEW_RGB else VIEW_RGB
        return [(clip_id, node) for (clip_id, tag), node in self._entries.items()
                if tag == opposite and clip_id != anchor_clip_id]


def select_negatives(bank: FeatureBank, anchor_clip_id: int, anchor_view_tag: str,
                     k: int, seed: int) -> list[ad.Node]:
    """Draw k opposite-view negatives for an anchor from the bank.

    Returns every eligible entry when k matches the eligible count, else
    a seeded uniform subsample without replacement.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    eligible = bank.eligible(anchor_clip_id, anchor_view_tag)
    if len(eligible) < k:
        raise ValueError(
            f"select_negatives: {len(eligible)} eligible negatives for clip {anchor_clip_id}, need {k}"
        )
    if k == len(eligible):
        return [node for _, node in eligible]
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(eligible), size=k, replace=False)
    return [eligible[i][1] for i in sorted(int(c) for c in chosen)]
