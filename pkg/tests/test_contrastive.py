"""Memory bank, negative sampling, dropout twins, and the loss."""

import numpy as np
import pytest

from contrarec import autodiff as ad
from contrarec.autodiff import Tape
from contrarec.contrastive import (
    RANDOM,
    SAME_LAST_ITEM,
    MemoryBank,
    build_negative_batch,
    contrastive_loss,
    contrastive_loss_batch,
    sample_negatives,
    twin_forward,
)
from contrarec.errors import ContractError
from contrarec.graph import batch_graphs
from contrarec.model import ModelConfig, ParameterStore, SessionGraphModel
from contrarec.rng import SeededRng


def make_bank(last_items=(3, 3, 3, 5, 5, 7), dim=4, fill=True):
    bank = MemoryBank(last_items, dim)
    if fill:
        rng = np.random.default_rng(0)
        ids = np.arange(len(last_items))
        bank.update(ids, rng.normal(size=(len(ids), dim)),
                    rng.normal(size=(len(ids), dim)))
    return bank


def make_model(seed=0, dropout=0.1):
    config = ModelConfig(dim=5, max_positions=8, dropout=dropout)
    store = ParameterStore(6, config, rng=SeededRng(seed).stream("init"))
    return SessionGraphModel(store)


class TestMemoryBank:
    def test_entries_start_invalid(self):
        bank = make_bank(fill=False)
        assert not bank.valid.any()

    def test_last_item_index_consistency(self):
        last_items = [3, 3, 5, 7, 5, 5]
        bank = make_bank(last_items, fill=False)
        for sid, item in enumerate(last_items):
            assert sid in bank.by_last_item[item]
            for other, ids in bank.by_last_item.items():
                if other != item:
                    assert sid not in ids

    def test_update_overwrites_and_validates(self):
        bank = make_bank(fill=False)
        bank.update([2], np.ones((1, 4)), np.full((1, 4), 2.0))
        assert bank.valid[2] and not bank.valid[0]
        np.testing.assert_array_equal(bank.first[2], np.ones(4))

    def test_update_detaches(self):
        bank = make_bank(fill=False)
        src = np.ones((1, 4))
        bank.update([0], src, src)
        src[:] = 99.0
        np.testing.assert_array_equal(bank.first[0], np.ones(4))

    def test_unknown_session_id_rejected(self):
        with pytest.raises(ContractError):
            make_bank(fill=False).update([17], np.ones((1, 4)), np.ones((1, 4)))


class TestSampleNegatives:
    def test_single_sharing_session_returns_both_twins(self):
        bank = make_bank([3, 3, 5], fill=True)
        vectors, fallback = sample_negatives(bank, 0, 3, 4, SAME_LAST_ITEM,
                                             SeededRng(0).stream("s"))
        assert not fallback
        assert vectors.shape == (2, 4)
        np.testing.assert_array_equal(vectors[0], bank.first[1])
        np.testing.assert_array_equal(vectors[1], bank.second[1])

    def test_self_is_excluded_and_falls_back(self):
        bank = make_bank([3, 5, 5], fill=True)
        # only the anchor itself ends in 3: must fall back to random valid
        vectors, fallback = sample_negatives(bank, 0, 3, 2, SAME_LAST_ITEM,
                                             SeededRng(0).stream("s"))
        assert fallback
        assert len(vectors) > 0

    def test_invalid_entries_never_sampled(self):
        bank = make_bank([3, 3, 3], fill=False)
        bank.update([1], np.ones((1, 4)), np.ones((1, 4)))
        vectors, fallback = sample_negatives(bank, 0, 3, 5, SAME_LAST_ITEM,
                                             SeededRng(0).stream("s"))
        assert not fallback
        assert len(vectors) == 2  # only session 1's pair

    def test_empty_bank_signals_skip(self):
        bank = make_bank(fill=False)
        vectors, fallback = sample_negatives(bank, 0, 3, 5, SAME_LAST_ITEM,
                                             SeededRng(0).stream("s"))
        assert len(vectors) == 0 and not fallback

    def test_seeded_subset_is_reproducible(self):
        bank = make_bank([3] * 11, fill=True)
        a, _ = sample_negatives(bank, 0, 3, 2, SAME_LAST_ITEM, SeededRng(7).stream("x"))
        b, _ = sample_negatives(bank, 0, 3, 2, SAME_LAST_ITEM, SeededRng(7).stream("x"))
        np.testing.assert_array_equal(a, b)
        assert a.shape == (4, 4)  # 2 sessions, both twins each

    def test_random_strategy_ignores_last_item_index(self):
        bank = make_bank([3, 5, 7, 9], fill=True)
        vectors, fallback = sample_negatives(bank, 0, 3, 3, RANDOM,
                                             SeededRng(1).stream("s"))
        assert not fallback and len(vectors) == 6

    def test_bad_strategy_rejected(self):
        with pytest.raises(ContractError):
            sample_negatives(make_bank(), 0, 3, 2, "nearest", SeededRng(0).stream("s"))


class TestTwinForward:
    def test_no_dropout_gives_identical_twins(self):
        model = make_model(dropout=0.0)
        batch = batch_graphs([[1, 2, 3], [4, 5]])
        rng = SeededRng(3).stream("d")
        first, second = twin_forward(model, batch, rng)
        np.testing.assert_array_equal(first.hybrid.data, second.hybrid.data)

    def test_dropout_makes_twins_differ(self):
        model = make_model(dropout=0.1)
        sessions = [[1, 2, 3], [4, 5], [2, 4, 6], [1, 6]] * 8
        batch = batch_graphs(sessions)
        rng = SeededRng(3).stream("d")
        first, second = twin_forward(model, batch, rng)
        differing = (np.abs(first.hybrid.data - second.hybrid.data).max(axis=1) > 0)
        assert differing.mean() >= 0.99

    def test_eval_mode_rejected(self):
        model = make_model()
        with pytest.raises(ContractError):
            twin_forward(model, batch_graphs([[1, 2]]), SeededRng(0).stream("d"),
                         training=False)


class TestContrastiveLoss:
    def test_no_negatives_gives_zero(self):
        loss = contrastive_loss(np.array([1.0, 0.0]), np.array([1.0, 0.0]),
                                [], tau=1.0)
        assert loss.item() == 0.0

    def test_hand_computed_value(self):
        # positive similarity 1, one negative at similarity -1, tau=1:
        # -log(e / (e + e^-1)) = log(1 + e^-2) ~ 0.126928
        s = np.array([1.0, 0.0])
        negative = np.array([[-2.0, 0.0]])
        loss = contrastive_loss(s, s, negative, tau=1.0)
        assert loss.item() == pytest.approx(-np.log(np.e / (np.e + np.exp(-1))),
                                            abs=1e-12)
        assert loss.item() == pytest.approx(0.12692801, abs=1e-7)

    def test_loss_decreases_as_positive_similarity_rises(self):
        rng = np.random.default_rng(0)
        negatives = rng.normal(size=(5, 3))
        anchor = np.array([1.0, 0.0, 0.0])
        values = []
        for angle in (0.9, 0.6, 0.3, 0.0):
            twin = np.array([np.cos(angle), np.sin(angle), 0.0])
            values.append(contrastive_loss(anchor, twin, negatives, tau=0.5).item())
        assert values == sorted(values, reverse=True)
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_loss_is_nonnegative_and_zero_only_without_negatives(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            s1 = rng.normal(size=4)
            s2 = rng.normal(size=4)
            negs = rng.normal(size=(int(rng.integers(1, 6)), 4))
            assert contrastive_loss(s1, s2, negs, tau=2.0).item() > 0.0

    def test_loss_vanishes_as_negatives_recede(self):
        # standard form: a single positive term in the denominator, so the
        # loss goes to 0 when all negative similarities head to -1
        s = np.array([1.0, 0.0])
        near = contrastive_loss(s, s, np.array([[-5.0, 0.0]] * 8), tau=0.05)
        assert near.item() == pytest.approx(0.0, abs=1e-6)

    def test_literal_form_counts_positive_per_negative(self):
        s = np.array([1.0, 0.0])
        negative = np.array([[0.0, 1.0], [0.0, -1.0]])  # sims 0, 0
        standard = contrastive_loss(s, s, negative, tau=1.0).item()
        literal = contrastive_loss(s, s, negative, tau=1.0, literal_form=True).item()
        # denominators: e + 2 vs 2e + 2
        assert standard == pytest.approx(float(-np.log(np.e / (np.e + 2))), abs=1e-12)
        assert literal == pytest.approx(float(-np.log(np.e / (2 * np.e + 2))), abs=1e-12)

    def test_tau_must_be_positive(self):
        with pytest.raises(ContractError):
            contrastive_loss(np.ones(2), np.ones(2), np.ones((1, 2)), tau=0.0)

    def test_no_gradient_flows_into_negatives(self):
        # negatives are plain arrays: the tape must not touch them
        s1 = ad.Tensor(np.array([[1.0, 0.5]]))
        s2 = ad.Tensor(np.array([[0.8, 0.7]]))
        negatives = np.array([[[0.3, -0.4]]])
        with Tape() as tape:
            loss = ad.reshape(contrastive_loss_batch(
                s1, s2, negatives, np.ones((1, 1), dtype=bool), tau=1.0), ())
        tape.backward(loss, [s1, s2])
        assert s1.grad is not None and np.abs(s1.grad).max() > 0
        assert s2.grad is not None

    def test_anchor_without_negatives_contributes_zero_in_batch(self):
        s1 = ad.Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        s2 = ad.Tensor(np.array([[1.0, 0.1], [0.1, 1.0]]))
        negatives = np.zeros((2, 2, 2))
        negatives[0, :, :] = [[1.0, 0.0], [0.5, 0.5]]
        mask = np.array([[True, True], [False, False]])
        losses = contrastive_loss_batch(s1, s2, negatives, mask, tau=1.0)
        assert losses.data[0] > 0.0
        assert losses.data[1] == pytest.approx(0.0, abs=1e-15)


class TestBuildNegativeBatch:
    def test_write_then_read_returns_new_vectors(self):
        bank = make_bank([3, 3], fill=False)
        bank.update([1], np.full((1, 4), 2.0), np.full((1, 4), 3.0))
        batch = batch_graphs([[1, 3]], session_ids=[0])
        negatives, mask, fallbacks = build_negative_batch(
            bank, batch, 4, SAME_LAST_ITEM, SeededRng(0).stream("n"))
        assert fallbacks == 0
        assert mask[0].sum() == 2
        np.testing.assert_array_equal(negatives[0, 0], np.full(4, 2.0))
        np.testing.assert_array_equal(negatives[0, 1], np.full(4, 3.0))

    def test_fallback_counted(self):
        bank = make_bank([3, 5], fill=True)
        batch = batch_graphs([[1, 3]], session_ids=[0])  # nobody else ends in 3
        _, _, fallbacks = build_negative_batch(
            bank, batch, 4, SAME_LAST_ITEM, SeededRng(0).stream("n"))
        assert fallbacks == 1
