"""Frozen-feature evaluation: linear probe and cosine retrieval.

Features come from a deterministic, augmentation-free pass over the
photometric view. The probe is a single affine layer trained by
full-batch gradient descent on softmax cross-entropy over the frozen
features; retrieval ranks train features by cosine similarity to each
test feature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamSet
from .encoder import EncoderConfig, encode
from .synth import VIEW_RGB, Clip, CorpusSplit

__all__ = [
    "DEFAULT_KS",
    "EvalReport",
    "extract_features",
    "linear_probe",
    "retrieval_topk",
    "evaluate_split",
]

DEFAULT_KS = (1, 5, 10, 20, 50)

FeatureRecord = tuple[int, int, np.ndarray]  # (clip_id, label, vector)


def extract_features(params: ParamSet, enc_config: EncoderConfig,
                     clips: list[Clip] | tuple[Clip, ...]) -> list[FeatureRecord]:
    """Unit-norm features of the raw photometric view, no augmentation."""
    records: list[FeatureRecord] = []
    for clip in clips:
        embedding = encode(params, enc_config, clip.frames[:-1], VIEW_RGB)
        records.append((clip.clip_id, clip.label, embedding.values.copy()))
    return records


def linear_probe(train_features: list[FeatureRecord], test_features: list[FeatureRecord],
                 iters: int = 300, lr: float = 0.5, seed: int = 0) -> float:
    """Top-1 accuracy of an affine softmax classifier on frozen features.

    Trained full-batch; with ``iters`` zero the seeded random initial
    layer is scored as-is. Test labels must all appear in train.
    """
    if iters < 0:
        raise ValueError(f"iters must be >= 0, got {iters}")
    if not train_features or not test_features:
        raise ValueError("linear_probe: empty feature list")
    train_labels = sorted({label for _, label, _ in train_features})
    missing = {label for _, label, _ in test_features} - set(train_labels)
    if missing:
        raise ValueError(f"linear_probe: test labels {sorted(missing)} never seen in train")
    index_of = {label: i for i, label in enumerate(train_labels)}
    x_train = np.stack([vec for _, _, vec in train_features]).astype(np.float64)
    y_train = np.array([index_of[label] for _, label, _ in train_features])
    x_test = np.stack([vec for _, _, vec in test_features]).astype(np.float64)
    y_test = np.array([index_of[label] for _, label, _ in test_features])

    n, d = x_train.shape
    c = len(train_labels)
    rng = np.random.default_rng(seed)
    weights = rng.uniform(-1.0, 1.0, size=(d, c)) / np.sqrt(d)
    bias = np.zeros(c)
    onehot = np.eye(c)[y_train]
    for _ in range(iters):
        logits = x_train @ weights + bias
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        delta = (probs - onehot) / n
        weights -= lr * (x_train.T @ delta)
        bias -= lr * delta.sum(axis=0)
    predictions = np.argmax(x_test @ weights + bias, axis=1)
    return float(np.mean(predictions == y_test))


def retrieval_topk(train_features: list[FeatureRecord], test_features: list[FeatureRecord],
                   ks: tuple[int, ...] = DEFAULT_KS) -> tuple[dict[int, float], dict[int, int]]:
    """Accuracy at each k: a query scores when any of its k cosine-nearest
    train features shares its label.

    Ties in similarity break toward the lower clip_id. Returns
    (accuracy per k, raw hit count per k).
    """
    if not train_features or not test_features:
        raise ValueError("retrieval_topk: empty feature list")
    ks = tuple(int(k) for k in ks)
    if not ks or any(k < 1 for k in ks):
        raise ValueError(f"retrieval_topk: ks must be positive, got {ks}")
    if max(ks) > len(train_features):
        raise ValueError(
            f"retrieval_topk: k = {max(ks)} exceeds the {len(train_features)}-feature train set"
        )

    def unit_rows(features: list[FeatureRecord]) -> np.ndarray:
        matrix = np.stack([vec for _, _, vec in features]).astype(np.float64)
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise ValueError("retrieval_topk: zero feature vector, cosine undefined")
        return matrix / norms

    x_train = unit_rows(train_features)
    x_test = unit_rows(test_features)
    train_ids = np.array([clip_id for clip_id, _, _ in train_features])
    train_labels = np.array([label for _, label, _ in train_features])
    hits = {k: 0 for k in ks}
    k_max = max(ks)
    similarities = x_test @ x_train.T
    for row, (_, query_label, _) in zip(similarities, test_features):
        ranked = np.lexsort((train_ids, -row))[:k_max]
        matches = train_labels[ranked] == query_label
        for k in ks:
            if matches[:k].any():
                hits[k] += 1
    n_test = len(test_features)
    accuracy = {k: hits[k] / n_test for k in ks}
    return accuracy, hits


@dataclass
class EvalReport:
    """One evaluation outcome, serialisable as a flat key = value block."""

    probe_top1: float
    retrieval: dict[int, float]
    retrieval_hits: dict[int, int]
    n_train: int
    n_test: int
    checkpoint_id: str = ""
    extra: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        values = [self.probe_top1, *self.retrieval.values()]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("accuracies must lie in [0, 1]")
        ordered = [self.retrieval[k] for k in sorted(self.retrieval)]
        if any(lo > hi for lo, hi in zip(ordered, ordered[1:])):
            raise ValueError(f"retrieval accuracy must be non-decreasing in k: {self.retrieval}")

    def to_text(self) -> str:
        lines = [f"config.{key} = {value}" for key, value in sorted(self.extra.items())]
        lines.append(f"checkpoint_id = {self.checkpoint_id}")
        lines.append(f"n_train = {self.n_train}")
        lines.append(f"n_test = {self.n_test}")
        lines.append(f"probe_top1 = {self.probe_top1!r}")
        for k in sorted(self.retrieval):
            lines.append(f"retrieval_top{k} = {self.retrieval[k]!r}")
        for k in sorted(self.retrieval_hits):
            lines.append(f"retrieval_hits_top{k} = {self.retrieval_hits[k]}")
        return "\n".join(lines) + "\n"


def evaluate_split(params: ParamSet, enc_config: EncoderConfig, split: CorpusSplit,
                   ks: tuple[int, ...] = DEFAULT_KS,
                   probe_iters: int = 300, probe_lr: float = 0.5,
                   probe_seed: int = 0, checkpoint_id: str = "",
                   extra: dict[str, str] | None = None) -> EvalReport:
    """Probe plus retrieval over the evaluation halves of a split."""
    train_features = extract_features(params, enc_config, split.eval_train)
    test_features = extract_features(params, enc_config, split.eval_test)
    usable_ks = tuple(k for k in ks if k <= len(train_features))
    if not usable_ks:
        raise ValueError(f"no usable k in {ks} for {len(train_features)} train features")
    accuracy, hits = retrieval_topk(train_features, test_features, usable_ks)
    probe = linear_probe(train_features, test_features, iters=probe_iters,
                         lr=probe_lr, seed=probe_seed)
    return EvalReport(probe_top1=probe, retrieval=accuracy, retrieval_hits=hits,
                      n_train=len(train_features), n_test=len(test_features),
                      checkpoint_id=checkpoint_id, extra=extra or {})
