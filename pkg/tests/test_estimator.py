import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from recoding_lm.estimator import RecodingLanguageModel, check_sentences

from conftest import TOY_LINES

SMALL = dict(embedding_size=8, hidden_size=8, batch_size=2, seq_len=5, epochs=2, lr=1.0, seed=3)


def test_get_set_params_and_clone():
    est = RecodingLanguageModel(**SMALL, recoding=True, signal="mcd", alpha=0.01)
    params = est.get_params()
    assert params["signal"] == "mcd" and params["hidden_size"] == 8
    copy = clone(est)
    assert copy.get_params() == params
    est.set_params(alpha=0.5)
    assert est.alpha == 0.5


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        RecodingLanguageModel().perplexity(TOY_LINES)


@pytest.mark.parametrize("bad,exc", [(123, TypeError), ([1, 2], TypeError), ([], ValueError), (["  "], ValueError)])
def test_sentence_validation(bad, exc):
    with pytest.raises(exc):
        check_sentences(bad)


def test_invalid_hyperparameters_fail_at_fit():
    with pytest.raises(ValueError):
        RecodingLanguageModel(**{**SMALL, "dropout": 1.5}).fit(TOY_LINES * 5)


def test_fit_score_transform(tmp_path):
    est = RecodingLanguageModel(**SMALL, recoding=True, signal="surprisal", alpha=0.1).fit(TOY_LINES * 5, X_valid=TOY_LINES)
    ppl = est.perplexity(TOY_LINES)
    assert ppl >= 1
    assert est.score(TOY_LINES) == pytest.approx(-np.log(ppl))
    surprisals = est.transform(TOY_LINES)
    assert [len(s) for s in surprisals] == [len(line.split()) + 1 for line in TOY_LINES]
    bits = np.concatenate(surprisals)
    assert 2 ** bits.mean() == pytest.approx(ppl, rel=1e-9)
    path = tmp_path / "est.npz"
    est.save(path)
    loaded = RecodingLanguageModel.load(path)
    assert loaded.get_params() == {**est.get_params(), "eval_mode": "sentence"}
    assert loaded.perplexity(TOY_LINES) == ppl


def test_single_string_input():
    est = RecodingLanguageModel(**SMALL).fit(TOY_LINES * 5)
    assert len(est.transform("the cat sat")) == 1
