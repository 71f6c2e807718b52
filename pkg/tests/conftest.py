import numpy as np
import pytest

from recoding_lm.config import RecodingConfig
from recoding_lm.corpus import build_vocab
from recoding_lm.network import RecurrentLM

TOY_LINES = [
    "the cat sat on the mat",
    "a dog ran in the park",
    "the dog sat on a mat",
    "a cat ran",
]


@pytest.fixture
def toy_lines():
    return list(TOY_LINES)


@pytest.fixture
def toy_vocab():
    return build_vocab(TOY_LINES)


def make_model(vocab_size, signal=None, alpha=None, seed=0, hidden=8, layers=2, **kwargs):
    recoding = RecodingConfig(enabled=signal is not None, signal=signal or "surprisal", alpha=alpha, **kwargs)
    return RecurrentLM.initialize(vocab_size, 6, hidden, layers, recoding, seed=seed, init_range=0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
