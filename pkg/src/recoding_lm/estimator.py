"""scikit-learn style wrapper around training, scoring and tracing."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RecodingConfig, TrainConfig
from .harness import evaluate, trace, train


def check_sentences(X, name: str = "X") -> list[str]:
    """Accept a single string or an iterable of strings; reject empty input."""
    if isinstance(X, str):
        X = [X]
    try:
        lines = list(X)
    except TypeError as exc:
        raise TypeError(f"{name} must be an iterable of sentences") from exc
    for i, line in enumerate(lines):
        if not isinstance(line, str):
            raise TypeError(f"{name}[{i}] is {type(line).__name__}, expected str")
    if not any(line.split() for line in lines):
        raise ValueError(f"{name} contains no tokens")
    return lines


class RecodingLanguageModel(TransformerMixin, BaseEstimator):
    """Word-level LSTM language model with optional test- and train-time recoding.

    Hyperparameters mirror ``TrainConfig``; the ``signal`` / ``step_kind`` /
    ``alpha`` group configures recoding when ``recoding=True``.

    ``transform`` maps sentences to per-token surprisal in bits, ``score``
    returns the negative mean per-token log loss (higher is better).
    """

    def __init__(self, layers=2, embedding_size=64, hidden_size=64, init_range=0.1, batch_size=16, lr=20.0,
                 clip=0.25, seq_len=20, epochs=8, dropout=0.15, seed=1234, min_count=1, recoding=False,
                 signal="surprisal", step_kind="fixed", alpha=None, k=15, mc_dropout=0.42, prior_scale=0.29,
                 weight_decay=4.82e-5, eval_seed=0, eval_mode="sentence"):
        self.layers = layers
        self.embedding_size = embedding_size
        self.hidden_size = hidden_size
        self.init_range = init_range
        self.batch_size = batch_size
        self.lr = lr
        self.clip = clip
        self.seq_len = seq_len
        self.epochs = epochs
        self.dropout = dropout
        self.seed = seed
        self.min_count = min_count
        self.recoding = recoding
        self.signal = signal
        self.step_kind = step_kind
        self.alpha = alpha
        self.k = k
        self.mc_dropout = mc_dropout
        self.prior_scale = prior_scale
        self.weight_decay = weight_decay
        self.eval_seed = eval_seed
        self.eval_mode = eval_mode

    def _config(self) -> TrainConfig:
        rec = RecodingConfig(enabled=bool(self.recoding), signal=self.signal, step_kind=self.step_kind,
                             alpha=self.alpha, k=self.k, mc_dropout=self.mc_dropout,
                             prior_scale=self.prior_scale, weight_decay=self.weight_decay)
        config = TrainConfig(layers=self.layers, embedding_size=self.embedding_size, hidden_size=self.hidden_size,
                             init_range=self.init_range, batch_size=self.batch_size, lr=self.lr, clip=self.clip,
                             seq_len=self.seq_len, epochs=self.epochs, dropout=self.dropout, seed=self.seed,
                             min_count=self.min_count, eval_seed=self.eval_seed, recoding=rec)
        config.validate()
        return config

    def fit(self, X, y=None, X_valid=None):
        """Train on sentences ``X``; ``X_valid`` (default ``X``) drives lr halving and model selection."""
        lines = check_sentences(X)
        valid = lines if X_valid is None else check_sentences(X_valid, "X_valid")
        result = train(self._config(), lines, valid)
        self.model_ = result.model
        self.vocab_ = result.vocab
        self.config_ = result.config
        self.valid_history_ = result.valid_history
        self.best_epoch_ = result.best_epoch
        self.metrics_ = result.metrics
        self.n_features_in_ = 1
        return self

    def evaluate(self, X, batch_size: int = 1):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, self.vocab_, check_sentences(X), batch_size=batch_size,
                        seq_len=self.config_.seq_len, eval_seed=self.eval_seed, mode=self.eval_mode)

    def perplexity(self, X) -> float:
        return self.evaluate(X).perplexity

    def score(self, X, y=None) -> float:
        return -math.log(self.perplexity(X))

    def trace(self, X, recode_at=None):
        check_is_fitted(self, "model_")
        return trace(self.model_, self.vocab_, check_sentences(X), recode_at=recode_at, eval_seed=self.eval_seed)

    def transform(self, X):
        """Per-sentence arrays of surprisal (bits) for every word and the closing ``<eos>``."""
        lines = check_sentences(X)
        records = self.trace(lines)
        use_post = self.model_.loss_on_post
        out = [[] for _ in lines]
        for rec in records:
            out[rec.sentence].append(rec.post_surprisal_bits if use_post else rec.surprisal_bits)
        return [np.asarray(row) for row in out]

    def save(self, path: str | Path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.vocab_, self.config_,
                        info={"valid_history": self.valid_history_, "best_epoch": self.best_epoch_})

    @classmethod
    def load(cls, path: str | Path) -> "RecodingLanguageModel":
        ckpt = load_checkpoint(path)
        cfg, rec = ckpt.config, ckpt.config.recoding
        est = cls(layers=cfg.layers, embedding_size=cfg.embedding_size, hidden_size=cfg.hidden_size,
                  init_range=cfg.init_range, batch_size=cfg.batch_size, lr=cfg.lr, clip=cfg.clip,
                  seq_len=cfg.seq_len, epochs=cfg.epochs, dropout=cfg.dropout, seed=cfg.seed,
                  min_count=cfg.min_count, recoding=rec.enabled, signal=rec.signal, step_kind=rec.step_kind,
                  alpha=rec.alpha, k=rec.k, mc_dropout=rec.mc_dropout, prior_scale=rec.prior_scale,
                  weight_decay=rec.weight_decay, eval_seed=cfg.eval_seed)
        est.model_, est.vocab_, est.config_ = ckpt.model, ckpt.vocab, cfg
        est.valid_history_ = ckpt.info.get("valid_history", [])
        est.best_epoch_ = ckpt.info.get("best_epoch", 0)
        est.metrics_ = []
        est.n_features_in_ = 1
        return est


__all__ = ["RecodingLanguageModel", "check_sentences", "NotFittedError"]
