"""Binary cross-view pairing branch.

Concatenated (photometric, residual) embedding pairs are labelled by
whether both halves come from the same clip; a single affine head plus
sigmoid scores each pair and the branch loss is the summed binary
cross-entropy. Mismatched pairs use a seeded derangement by default so
every clip contributes exactly one positive and one negative.
"""

from __future__ import annotations

from dataclasses import dataclass
from collections.abc import Sequence

import numpy as np

from . import autodiff as ad

__all__ = [
    "LabeledPair",
    "HEAD_WEIGHT",
    "HEAD_BIAS",
    "init_head",
    "derangement",
    "fcm_pairs",
    "classify",
    "bce_loss",
]

HEAD_WEIGHT = "head.w"
HEAD_BIAS = "head.b"

# probabilities are clamped into [PROB_FLOOR, 1 - PROB_FLOOR] before the log
PROB_FLOOR = 1e-12

PAIR_POLICIES = ("derangement", "all-pairs")


@dataclass(frozen=True)
class LabeledPair:
    """A concatenated cross-view feature with its same-clip label."""

    feature: ad.Node
    label: int
    source_ids: tuple[int, int]


def init_head(embed_dim: int, seed: int, init_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Head entries for merging into the model ParamSet.

    The weight covers a concatenated pair (2 * embed_dim inputs); the
    bias starts at zero like every other bias in the model.
    """
    if embed_dim < 2:
        raise ValueError(f"embed_dim must be >= 2, got {embed_dim}")
    rng = np.random.default_rng(seed)
    width = 2 * embed_dim
    bound = init_scale / np.sqrt(width)
    return {
        HEAD_WEIGHT: rng.uniform(-bound, bound, size=width),
        HEAD_BIAS: np.zeros(()),
    }


def derangement(n: int, seed: int) -> np.ndarray:
    """A seeded permutation of range(n) with no fixed points."""
    if n < 2:
        raise ValueError(f"derangement needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def fcm_pairs(rgb_embeddings: Sequence[tuple[int, ad.Node]],
              res_embeddings: Sequence[tuple[int, ad.Node]],
              seed: int,
              policy: str = "derangement",
              mirrored: bool = False) -> list[LabeledPair]:
    """Labelled cross-view pairs for a batch.

    Inputs are (clip_id, embedding) lists covering the same clips. Label
    1 pairs concatenate the two views of one clip; label 0 pairs mix the
    photometric view of one clip with the residual view of another,
    chosen by a seeded derangement (balanced, one per clip) or by
    enumerating all mismatches. ``mirrored`` additionally emits each pair
    with the concatenation order reversed.
    """
    if policy not in PAIR_POLICIES:
        raise ValueError(f"unknown pair policy {policy!r}, expected one of {PAIR_POLICIES}")
    rgb = list(rgb_embeddings)
    res = list(res_embeddings)
    rgb_ids = [clip_id for clip_id, _ in rgb]
    res_ids = {clip_id for clip_id, _ in res}
    if len(rgb) != len(res) or set(rgb_ids) != res_ids or len(rgb_ids) != len(set(rgb_ids)):
        raise ValueError("fcm_pairs: the two views must cover the same distinct clips")
    if len(rgb) < 2:
        raise ValueError(f"fcm_pairs: need at least 2 clips, got {len(rgb)}")
    res_by_id = {clip_id: node for clip_id, node in res}

    def emit(pairs: list[LabeledPair], rgb_id: int, rgb_node: ad.Node,
             res_id: int, label: int) -> None:
        res_node = res_by_id[res_id]
        pairs.append(LabeledPair(ad.concat([rgb_node, res_node]), label, (rgb_id, res_id)))
        if mirrored:
            pairs.append(LabeledPair(ad.concat([res_node, rgb_node]), label, (rgb_id, res_id)))

    pairs: list[LabeledPair] = []
    for clip_id, rgb_node in rgb:
        emit(pairs, clip_id, rgb_node, clip_id, 1)
    if policy == "derangement":
        perm = derangement(len(rgb), seed)
        for i, (clip_id, rgb_node) in enumerate(rgb):
            emit(pairs, clip_id, rgb_node, rgb_ids[int(perm[i])], 0)
    else:
        for clip_id, rgb_node in rgb:
            for other_id in rgb_ids:
                if other_id != clip_id:
                    emit(pairs, clip_id, rgb_node, other_id, 0)
    return pairs


def classify(params: ad.ParamSet, feature: ad.Node) -> ad.Node:
    """Probability that a concatenated pair is a same-clip pair."""
    weight = params[HEAD_WEIGHT]
    feature = ad.as_node(feature)
    if feature.shape != weight.shape:
        raise ValueError(
            f"classify: feature width {feature.shape} does not match head width {weight.shape}"
        )
    logit = ad.add(ad.reduce_sum(ad.mul(weight, feature)), params[HEAD_BIAS])
    return ad.sigmoid(logit)


def bce_loss(probs: Sequence[ad.Node], labels: Sequence[int]) -> ad.Node:
    """Summed binary cross-entropy over pairs (a sum, not a mean).

    Probabilities are clamped away from 0 and 1 before the log so a
    saturated sigmoid cannot produce an infinite loss.
    """
    probs = list(probs)
    labels = [int(label) for label in labels]
    if len(probs) != len(labels):
        raise ValueError(f"bce_loss: {len(probs)} probs vs {len(labels)} labels")
    if not probs:
        raise ValueError("bce_loss: need at least one pair")
    if any(label not in (0, 1) for label in labels):
        raise ValueError(f"bce_loss: labels must be 0 or 1, got {sorted(set(labels))}")
    p = ad.clip(ad.stack(probs), PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = ad.Node(np.array(labels, dtype=np.float64))
    terms = ad.add(ad.mul(y, ad.log(p)), ad.mul(ad.sub(1.0, y), ad.log(ad.sub(1.0, p))))
    return ad.mul(ad.reduce_sum(terms), -1.0)
