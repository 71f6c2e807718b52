import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recoding_lm.functional import entropy, softmax
from recoding_lm.signals import (EnsembleDecoders, amortized_total_loss, anchor_loss, anchor_loss_grad, bae_signal,
                                 draw_dropout_masks, init_ensemble, mcd_signal, surprisal, surprisal_signal)
from recoding_lm.verifier import check_top_gradient, finite_diff_grad, relative_error, toy_model


def test_surprisal_closed_forms():
    assert surprisal(1.0) == 0.0
    assert surprisal(0.5) == pytest.approx(math.sqrt(2) - 1, abs=1e-12)
    assert surprisal(1 / math.e) == pytest.approx(math.exp(1 / math.e) - 1, abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-9, 1.0))
def test_surprisal_bounded_by_peak(p):
    assert 0.0 <= surprisal(p) <= math.exp(1 / math.e) - 1 + 1e-12


@pytest.mark.parametrize("signal,kwargs", [("surprisal", {}), ("mcd", dict(k=10, mc_dropout=0.42)),
                                           ("bae", dict(k=3))])
def test_top_grad_finite_differences(signal, kwargs):
    report = check_top_gradient(toy_model(signal, seed=0, **kwargs), seed=0)
    assert report.passed, report.line()


def test_surprisal_signal_batch_matches_single(rng):
    w = rng.normal(size=(5, 3))
    z = rng.normal(size=(4, 3))
    probs = softmax(z @ w.T)
    gold = np.array([0, 3, 2, 4])
    batch = surprisal_signal(probs, gold, w)
    for i in range(4):
        one = surprisal_signal(probs[i], gold[i], w)
        assert one.delta == pytest.approx(batch.delta[i], rel=1e-14)
        assert np.allclose(one.top_grad, batch.top_grad[i], rtol=1e-14)


def test_mcd_zero_dropout_is_plain_entropy(rng):
    w, b, h = rng.normal(size=(6, 4)), rng.normal(size=6), rng.normal(size=4)
    out = mcd_signal(h, w, b, k=7, p=0.0, rng=rng)
    assert np.all(out.masks == 1)
    assert out.delta == pytest.approx(entropy(softmax(w @ h + b)), rel=1e-12)


def test_uniform_average_entropy():
    out = mcd_signal(np.zeros(3), np.zeros((4, 3)), np.zeros(4), k=5, p=0.3, rng=np.random.default_rng(0))
    assert out.delta == pytest.approx(math.log(4))


def test_mcd_rejects_bad_rate(rng):
    with pytest.raises(ValueError):
        mcd_signal(np.zeros(3), np.zeros((4, 3)), np.zeros(4), k=2, p=1.0, rng=rng)


def test_mcd_frozen_mask_oracle():
    rng = np.random.default_rng(7)
    w, b, h = rng.normal(size=(11, 7)), rng.normal(size=11), rng.normal(size=7)
    masks = draw_dropout_masks(10, w.shape, 0.42, rng)
    out = mcd_signal(h, w, b, 10, 0.42, masks=masks)
    numeric = finite_diff_grad(lambda v: mcd_signal(v, w, b, 10, 0.42, masks=masks).delta, h)
    assert relative_error(out.top_grad, numeric).max() <= 1e-4


def test_masks_keep_rate():
    masks = draw_dropout_masks(200, (20, 20), 0.42, np.random.default_rng(0))
    assert set(np.unique(masks)) <= {0.0, 1.0}
    assert abs(masks.mean() - 0.58) < 0.01


def test_bae_single_member_entropy(rng):
    ens = init_ensemble(9, 4, 1, 0.29, 1e-3, rng)
    h = rng.normal(size=4)
    assert bae_signal(h, ens).delta == entropy(softmax(ens.weights[0] @ h + ens.biases[0]))


def test_bae_identical_members(rng):
    w = rng.normal(size=(9, 4))
    single = EnsembleDecoders(w[None], np.zeros((1, 9)), w[None], 0.29, 0.0)
    many = EnsembleDecoders(np.stack([w] * 4), np.zeros((4, 9)), w[None], 0.29, 0.0)
    h = rng.normal(size=4)
    assert bae_signal(h, many).delta == pytest.approx(bae_signal(h, single).delta, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_entropy_signal_bounded(seed):
    rng = np.random.default_rng(seed)
    v = int(rng.integers(2, 12))
    ens = init_ensemble(v, 5, 3, 1.0, 0.0, rng)
    delta = bae_signal(rng.normal(scale=3.0, size=(8, 5)), ens).delta
    assert np.all(delta >= -1e-12) and np.all(delta <= math.log(v) + 1e-12)


def test_anchor_loss_examples():
    ens = EnsembleDecoders(np.ones((1, 2, 2)), np.zeros((1, 2)), np.zeros((1, 2, 2)), 0.29, 0.25)
    assert anchor_loss(ens, 1)[0] == pytest.approx(1.0)
    same = EnsembleDecoders(np.ones((3, 2, 2)), np.zeros((3, 2)), np.ones((1, 2, 2)), 0.29, 0.25)
    assert np.all(anchor_loss(same, 10) == 0)
    assert np.all(anchor_loss_grad(same, 10) == 0)
    no_decay = EnsembleDecoders(np.ones((2, 2, 2)), np.zeros((2, 2)), np.zeros((1, 2, 2)), 0.29, 0.0)
    assert np.all(anchor_loss(no_decay, 1) == 0)


def test_anchor_loss_grad_fd(rng):
    ens = init_ensemble(4, 3, 2, 0.5, 0.3, rng, per_member_anchors=True)
    analytic = anchor_loss_grad(ens, 5)

    def f(w):
        return anchor_loss(EnsembleDecoders(w, ens.biases, ens.anchors, 0.5, 0.3), 5).sum()
    assert relative_error(analytic, finite_diff_grad(f, ens.weights)).max() <= 1e-6


def test_shared_anchor_default(rng):
    assert init_ensemble(4, 3, 5, 0.29, 0.1, rng).anchors.shape == (1, 4, 3)
    assert init_ensemble(4, 3, 5, 0.29, 0.1, rng, per_member_anchors=True).anchors.shape == (5, 4, 3)


def test_amortized_total():
    assert amortized_total_loss([2.5], [0.5]) == 3.0
    assert amortized_total_loss([2, 4], [0, 0]) == 3.0
    assert amortized_total_loss([1, 1, 1], [0.5, 0.5, 0.5]) == 1.5
    with pytest.raises(ValueError):
        amortized_total_loss([1, 2], [0.1])
