"""Evaluation harness oracles: probe, retrieval, and report serialisation."""

import numpy as np
import pytest

from metacontrast.encoder import EncoderConfig, init_encoder
from metacontrast.evaluation import (EvalReport, evaluate_split, extract_features,
                                     linear_probe, retrieval_topk)
from metacontrast.synth import generate_corpus, split_support_query


def one_hot_features(labels, dim=None, start_id=0):
    dim = dim or (max(labels) + 1)
    out = []
    for i, label in enumerate(labels):
        vec = np.zeros(dim)
        vec[label] = 1.0
        out.append((start_id + i, label, vec))
    return out


def noise_features(labels, dim, rng, start_id=0):
    return [(start_id + i, label, rng.normal(size=dim))
            for i, label in enumerate(labels)]


# ---------------------------------------------------------------------------
# linear probe


def test_probe_on_one_hot_features_is_perfect():
    train = one_hot_features([0, 1, 2, 0, 1, 2])
    test = one_hot_features([2, 1, 0], start_id=100)
    assert linear_probe(train, test, iters=100) == 1.0


def test_probe_on_noise_features_sits_at_chance():
    rng = np.random.default_rng(0)
    labels = [i % 4 for i in range(80)]
    accuracies = []
    for trial in range(20):
        train = noise_features(labels, dim=8, rng=rng)
        test = noise_features(labels, dim=8, rng=rng, start_id=1000)
        accuracies.append(linear_probe(train, test, iters=100, seed=trial))
    mean = float(np.mean(accuracies))
    # chance is 0.25; the Monte-Carlo band is generous but one-sided enough
    # to catch label leakage (which would push accuracy toward 1)
    assert 0.15 < mean < 0.35


def test_probe_zero_iters_scores_the_random_layer():
    train = one_hot_features([0, 1, 0, 1])
    test = one_hot_features([0, 1], start_id=10)
    a = linear_probe(train, test, iters=0, seed=0)
    b = linear_probe(train, test, iters=0, seed=0)
    assert a == b
    assert 0.0 <= a <= 1.0


def test_probe_is_deterministic_with_fixed_seed():
    rng = np.random.default_rng(3)
    labels = [i % 3 for i in range(30)]
    train = noise_features(labels, dim=6, rng=rng)
    test = noise_features(labels, dim=6, rng=rng, start_id=500)
    assert (linear_probe(train, test, iters=50, seed=4)
            == linear_probe(train, test, iters=50, seed=4))


def test_probe_validation():
    train = one_hot_features([0, 1])
    with pytest.raises(ValueError):
        linear_probe([], train)
    with pytest.raises(ValueError):
        linear_probe(train, one_hot_features([2], dim=3, start_id=9))
    with pytest.raises(ValueError):
        linear_probe(train, train, iters=-1)


# ---------------------------------------------------------------------------
# retrieval


def test_retrieval_on_orthogonal_clusters_is_perfect():
    train = one_hot_features([0, 1, 2, 3, 0, 1, 2, 3], dim=4)
    test = one_hot_features([3, 2, 1, 0], dim=4, start_id=50)
    accuracy, hits = retrieval_topk(train, test, ks=(1, 2))
    assert accuracy == {1: 1.0, 2: 1.0}
    assert hits == {1: 4, 2: 4}


def test_retrieval_scores_any_hit_within_k():
    # nearest neighbour is wrong-label, second nearest matches
    train = [
        (0, 0, np.array([1.0, 0.0])),
        (1, 1, np.array([0.9, 0.1])),
    ]
    test = [(10, 0, np.array([0.95, 0.08]))]
    accuracy, _ = retrieval_topk(train, test, ks=(1, 2))
    assert accuracy[1] == 0.0
    assert accuracy[2] == 1.0


def test_retrieval_accuracy_is_monotone_in_k():
    rng = np.random.default_rng(1)
    labels = [i % 4 for i in range(40)]
    train = noise_features(labels, dim=6, rng=rng)
    test = noise_features(labels, dim=6, rng=rng, start_id=900)
    accuracy, _ = retrieval_topk(train, test, ks=(1, 3, 10, 40))
    ordered = [accuracy[k] for k in (1, 3, 10, 40)]
    assert ordered == sorted(ordered)
    assert accuracy[40] == 1.0  # every label present in the full train set


def test_retrieval_ties_break_toward_lower_clip_id():
    anchor = np.array([1.0, 0.0])
    train = [
        (7, 1, anchor.copy()),
        (3, 0, anchor.copy()),
    ]
    test = [(99, 0, anchor.copy())]
    accuracy, _ = retrieval_topk(train, test, ks=(1,))
    assert accuracy[1] == 1.0
    test_other = [(99, 1, anchor.copy())]
    accuracy_other, _ = retrieval_topk(train, test_other, ks=(1,))
    assert accuracy_other[1] == 0.0


def test_retrieval_scales_are_irrelevant():
    train = one_hot_features([0, 1], dim=2)
    scaled = [(cid, label, vec * 37.0) for cid, label, vec in train]
    test = one_hot_features([0, 1], dim=2, start_id=10)
    assert retrieval_topk(train, test, ks=(1,))[0] == retrieval_topk(scaled, test, ks=(1,))[0]


def test_retrieval_validation():
    train = one_hot_features([0, 1])
    with pytest.raises(ValueError):
        retrieval_topk(train, [], ks=(1,))
    with pytest.raises(ValueError):
        retrieval_topk(train, train, ks=(0,))
    with pytest.raises(ValueError):
        retrieval_topk(train, train, ks=(3,))
    bad = [(0, 0, np.zeros(2)), (1, 1, np.array([1.0, 0.0]))]
    with pytest.raises(ValueError):
        retrieval_topk(bad, train, ks=(1,))


# ---------------------------------------------------------------------------
# report and end-to-end split evaluation


def test_eval_report_validates_and_serialises():
    report = EvalReport(probe_top1=0.75, retrieval={1: 0.5, 5: 0.75},
                        retrieval_hits={1: 2, 5: 3}, n_train=8, n_test=4,
                        checkpoint_id="abc123", extra={"mode": "meta"})
    text = report.to_text()
    assert "probe_top1 = 0.75" in text
    assert "retrieval_top1 = 0.5" in text
    assert "retrieval_hits_top5 = 3" in text
    assert "config.mode = meta" in text
    assert text.index("config.mode") < text.index("checkpoint_id")


def test_eval_report_rejects_bad_values():
    with pytest.raises(ValueError):
        EvalReport(probe_top1=1.5, retrieval={1: 0.5}, retrieval_hits={1: 1},
                   n_train=2, n_test=2)
    with pytest.raises(ValueError):
        EvalReport(probe_top1=0.5, retrieval={1: 0.9, 5: 0.4}, retrieval_hits={1: 3, 5: 2},
                   n_train=2, n_test=2)


def test_evaluate_split_end_to_end_is_deterministic():
    corpus = generate_corpus(n_classes=2, clips_per_class=6, n_view_frames=3,
                             h=8, w=8, c=1, seed=1, noise_std=0.005)
    split = split_support_query(corpus, 0.5, seed=0)
    enc = EncoderConfig(input_dims=(3, 8, 8, 1), hidden_width=8, embed_dim=4)
    params = init_encoder(enc, seed=0)
    a = evaluate_split(params, enc, split, ks=(1, 3), probe_iters=50)
    b = evaluate_split(params, enc, split, ks=(1, 3), probe_iters=50)
    assert a.to_text() == b.to_text()
    assert a.n_train == a.n_test == 6
    assert set(a.retrieval) == {1, 3}


def test_evaluate_split_drops_oversized_ks():
    corpus = generate_corpus(n_classes=2, clips_per_class=4, n_view_frames=3,
                             h=8, w=8, c=1, seed=1, noise_std=0.005)
    split = split_support_query(corpus, 0.5, seed=0)
    enc = EncoderConfig(input_dims=(3, 8, 8, 1), hidden_width=8, embed_dim=4)
    params = init_encoder(enc, seed=0)
    report = evaluate_split(params, enc, split, ks=(1, 50))
    assert set(report.retrieval) == {1}
    with pytest.raises(ValueError):
        evaluate_split(params, enc, split, ks=(50,))


def test_extract_features_ignores_augmentation_and_uses_raw_view():
    corpus = generate_corpus(n_classes=2, clips_per_class=2, n_view_frames=3,
                             h=8, w=8, c=1, seed=2, noise_std=0.005)
    enc = EncoderConfig(input_dims=(3, 8, 8, 1), hidden_width=8, embed_dim=4)
    params = init_encoder(enc, seed=0)
    a = extract_features(params, enc, corpus)
    b = extract_features(params, enc, corpus)
    for (id_a, label_a, vec_a), (id_b, label_b, vec_b) in zip(a, b):
        assert (id_a, label_a) == (id_b, label_b)
        np.testing.assert_array_equal(vec_a, vec_b)
        assert np.linalg.norm(vec_a) == pytest.approx(1.0, abs=1e-12)