"""Score, contrastive loss closed forms, and the feature bank."""

import numpy as np
import pytest

from metacontrast import autodiff as ad
from metacontrast.contrastive import (ContrastiveConfig, FeatureBank, nce_loss, score,
                                      select_negatives)
from metacontrast.synth import VIEW_RES, VIEW_RGB


def unit(values):
    v = np.asarray(values, dtype=np.float64)
    return ad.Node(v / np.linalg.norm(v))


def basis(i, dim=4):
    v = np.zeros(dim)
    v[i] = 1.0
    return ad.Node(v)


# ---------------------------------------------------------------------------
# score


def test_score_is_cosine_over_temperature():
    a = unit([1.0, 1.0, 0.0])
    b = unit([1.0, 0.0, 0.0])
    expected = (1.0 / np.sqrt(2.0)) / 0.25
    assert score(a, b, tau=0.25).values == pytest.approx(expected, rel=1e-12)


def test_score_extremes():
    assert score(basis(0), basis(0), tau=0.5).values == pytest.approx(2.0)
    assert score(basis(0), basis(1), tau=0.5).values == pytest.approx(0.0)


def test_score_validation():
    with pytest.raises(ValueError):
        score(basis(0), basis(0), tau=0.0)
    with pytest.raises(ValueError):
        score(basis(0, 3), basis(0, 4), tau=1.0)
    with pytest.raises(ValueError):
        score(ad.Node(np.zeros(3)), basis(0, 3), tau=1.0)


# ---------------------------------------------------------------------------
# closed forms


@pytest.mark.parametrize("k", [1, 7, 63])
def test_uniform_scores_give_log_k_plus_one(k):
    """All candidates at the same score: loss is the log candidate count."""
    anchor = basis(0, 8)
    positive = basis(1, 8)
    negatives = [basis(1, 8) for _ in range(k)]
    loss = nce_loss(anchor, positive, negatives, tau=0.7)
    assert loss.values == pytest.approx(np.log(k + 1), abs=1e-9)


def test_two_point_closed_form():
    """Aligned positive, orthogonal negative, tau 1: -ln(e / (e + 1))."""
    anchor = basis(0)
    loss = nce_loss(anchor, basis(0), [basis(1)], tau=1.0)
    expected = -np.log(np.e / (np.e + 1.0))
    assert loss.values == pytest.approx(expected, abs=1e-9)


def test_loss_decreases_as_positive_aligns():
    negatives = [basis(2)]
    far = nce_loss(basis(0), basis(1), negatives, tau=0.2)
    near = nce_loss(basis(0), unit([1.0, 0.2, 0.0, 0.0]), negatives, tau=0.2)
    aligned = nce_loss(basis(0), basis(0), negatives, tau=0.2)
    assert far.values > near.values > aligned.values > 0.0


def test_loss_is_stable_for_tiny_temperature():
    loss = nce_loss(basis(0), basis(0), [basis(1), basis(2)], tau=1e-3)
    assert np.isfinite(loss.values)
    assert loss.values == pytest.approx(0.0, abs=1e-9)


def test_loss_gradient_matches_numeric():
    rng = np.random.default_rng(0)
    anchor_raw = rng.normal(size=4)
    params = ad.ParamSet({"anchor": anchor_raw})

    def loss_of(p):
        anchor = ad.l2_normalize(p["anchor"], axis=-1)
        return nce_loss(anchor, unit([1.0, 0.5, 0.0, 0.0]),
                        [basis(2), unit([0.1, -1.0, 0.3, 0.0])], tau=0.4)

    analytic = ad.backward(loss_of(params), params)["anchor"]
    numeric = ad.numeric_grad(loss_of, params, eps=1e-6)["anchor"]
    assert np.abs(analytic - numeric).max() < 1e-7


def test_nce_loss_requires_negatives():
    with pytest.raises(ValueError):
        nce_loss(basis(0), basis(0), [], tau=1.0)


# ---------------------------------------------------------------------------
# feature bank


def test_bank_add_and_eligibility_rules():
    bank = FeatureBank(capacity=8)
    bank.add(0, VIEW_RGB, basis(0))
    bank.add(0, VIEW_RES, basis(1))
    bank.add(1, VIEW_RES, basis(2))
    bank.add(2, VIEW_RGB, basis(3))
    picks = bank.eligible(0, VIEW_RGB)
    assert [clip_id for clip_id, _ in picks] == [1]
    picks = bank.eligible(1, VIEW_RES)
    assert [clip_id for clip_id, _ in picks] == [0, 2]


def test_bank_readding_replaces_entry():
    bank = FeatureBank(capacity=8)
    bank.add(0, VIEW_RGB, basis(0))
    bank.add(0, VIEW_RGB, basis(1))
    assert len(bank) == 1
    (_, node), = bank.eligible(5, VIEW_RES)
    np.testing.assert_array_equal(node.values, basis(1).values)


def test_bank_evicts_oldest_beyond_capacity():
    bank = FeatureBank(capacity=2)
    bank.add(0, VIEW_RGB, basis(0))
    bank.add(1, VIEW_RGB, basis(1))
    bank.add(2, VIEW_RGB, basis(2))
    assert sorted(clip_id for clip_id, _ in bank.keys()) == [1, 2]


def test_readding_refreshes_age():
    bank = FeatureBank(capacity=2)
    bank.add(0, VIEW_RGB, basis(0))
    bank.add(1, VIEW_RGB, basis(1))
    bank.add(0, VIEW_RGB, basis(2))
    bank.add(5, VIEW_RGB, basis(3))
    assert sorted(clip_id for clip_id, _ in bank.keys()) == [0, 5]


def test_bank_rejects_non_unit_entries_and_bad_tags():
    bank = FeatureBank()
    with pytest.raises(ValueError):
        bank.add(0, VIEW_RGB, ad.Node(np.array([2.0, 0.0])))
    with pytest.raises(ValueError):
        bank.add(0, "depth", basis(0))
    with pytest.raises(ValueError):
        FeatureBank(capacity=0)


def test_select_negatives_all_and_subsample():
    bank = FeatureBank()
    for clip_id in range(6):
        bank.add(clip_id, VIEW_RES, basis(clip_id % 4, 4))
    full = select_negatives(bank, anchor_clip_id=0, anchor_view_tag=VIEW_RGB, k=5, seed=0)
    assert len(full) == 5
    sub_a = select_negatives(bank, 0, VIEW_RGB, k=3, seed=1)
    sub_b = select_negatives(bank, 0, VIEW_RGB, k=3, seed=1)
    assert len(sub_a) == 3
    for a, b in zip(sub_a, sub_b):
        np.testing.assert_array_equal(a.values, b.values)
    with pytest.raises(ValueError):
        select_negatives(bank, 0, VIEW_RGB, k=6, seed=0)
    with pytest.raises(ValueError):
        select_negatives(bank, 0, VIEW_RGB, k=0, seed=0)


def test_contrastive_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(tau=-0.1)
    with pytest.raises(ValueError):
        ContrastiveConfig(k=-1)
    with pytest.raises(ValueError):
        ContrastiveConfig(bank_mode="global")
