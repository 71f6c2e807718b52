"""Training loop, perplexity evaluation, per-word traces and recoder ablations."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import RecodingConfig, TrainConfig
from .corpus import Vocabulary, batchify, build_vocab, encode
from .lstm import DivergenceError, LmParameters, anneal_lr, sgd_step
from .network import RecurrentLM, ensemble_arrays, make_dropout_mask
from .signals import init_ensemble

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "batch", "loss", "mean_delta", "mean_alpha", "lr")
TRACE_FIELDS = ("sentence", "position", "token", "surprisal_bits", "delta", "post_surprisal_bits",
                "post_delta", "recoded")


@dataclass
class EvalReport:
    perplexity: float
    tokens: int
    batch_losses: list[float]
    tokens_per_second: float
    eval_seed: int
    mode: str = "stream"
    notes: list[str] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"perplexity={self.perplexity:.6f}", f"tokens={self.tokens}",
                 f"tokens_per_second={self.tokens_per_second:.1f}", f"eval_seed={self.eval_seed}",
                 f"mode={self.mode}"]
        lines += [f"note={n}" for n in self.notes]
        return "\n".join(lines)


@dataclass
class TraceRecord:
    sentence: int
    position: int
    token: str
    surprisal_bits: float
    delta: float
    post_surprisal_bits: float
    post_delta: float
    recoded: bool


@dataclass
class TrainResult:
    model: RecurrentLM
    vocab: Vocabulary
    config: TrainConfig
    valid_history: list[float]
    best_epoch: int
    metrics: list[dict]


def _rng_streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def build_model(config: TrainConfig, vocab_size: int) -> RecurrentLM:
    return RecurrentLM.initialize(vocab_size, config.embedding_size, config.hidden_size, config.layers,
                                  config.recoding, seed=config.seed, init_range=config.init_range)


def _mean_alpha(result) -> float:
    values = [np.mean(a) for step in result.steps if step.recoded for a in step.alphas.values()]
    return float(np.mean(values)) if values else 0.0


def _mean_delta(result) -> float:
    deltas = [step.delta for step in result.steps if step.delta is not None]
    return float(np.mean(deltas)) if deltas else 0.0


def train(config: TrainConfig, train_lines, valid_lines, out: str | Path | None = None,
          metrics_path: str | Path | None = None, vocab: Vocabulary | None = None) -> TrainResult:
    """Truncated-BPTT SGD with lr halving and best-validation model selection.

    The best-validation parameters are returned (and written to ``out`` after
    every epoch that improves on them).
    """
    config.validate()
    train_lines = list(train_lines)
    vocab = vocab or build_vocab(train_lines, config.min_count)
    train_ids = encode(train_lines, vocab)
    data = batchify(train_ids, config.batch_size, config.seq_len)
    model = build_model(config, len(vocab))
    dropout_rng, signal_rng = _rng_streams(config.seed, 2)
    lr = config.lr
    history: list[float] = []
    metrics: list[dict] = []
    best_params = model.params.copy()
    best_epoch = 0
    writer = None
    handle = open(metrics_path, "w", newline="", encoding="utf-8") if metrics_path else None
    try:
        if handle:
            writer = csv.DictWriter(handle, fieldnames=METRIC_FIELDS)
            writer.writeheader()
        for epoch in range(1, config.epochs + 1):
            state = model.initial_state(config.batch_size)
            for batch, (inputs, targets) in enumerate(data):
                mask = make_dropout_mask(config.batch_size, config.hidden_size, config.dropout, dropout_rng)
                result = model.forward(inputs, targets, state, dropout_mask=mask, signal_rng=signal_rng,
                                       member_loss=True, n_tokens=len(train_ids))
                if not math.isfinite(result.loss):
                    raise DivergenceError(f"divergence: non-finite loss in epoch {epoch}, batch {batch}")
                grads = model.backward(result)
                model.params = sgd_step(model.params, grads, lr, config.clip)
                state = result.final_state
                row = {"epoch": epoch, "batch": batch, "loss": result.loss, "mean_delta": _mean_delta(result),
                       "mean_alpha": _mean_alpha(result), "lr": lr}
                metrics.append(row)
                if writer:
                    writer.writerow(row)
            valid = evaluate(model, vocab, valid_lines, batch_size=config.eval_batch_size,
                             seq_len=config.seq_len, eval_seed=config.eval_seed)
            if not math.isfinite(valid.perplexity):
                raise DivergenceError(f"divergence: non-finite validation perplexity in epoch {epoch}")
            history.append(valid.perplexity)
            log.info("epoch %d  lr %.4g  valid ppl %.3f", epoch, lr, valid.perplexity)
            if valid.perplexity == min(history):
                best_params = model.params.copy()
                best_epoch = epoch
                if out is not None:
                    save_checkpoint(out, model, vocab, config,
                                    info={"epoch": epoch, "valid_perplexity": valid.perplexity,
                                          "valid_history": history})
            lr = anneal_lr(history, lr)
    finally:
        if handle:
            handle.close()
    model.params = best_params
    return TrainResult(model, vocab, config, history, best_epoch, metrics)


# -- evaluation ---------------------------------------------------------------

def _sentence_batches(lines, vocab: Vocabulary, batch_size: int):
    """Each sentence as ``<eos> w1 .. wn`` -> ``w1 .. wn <eos>``, padded per batch."""
    seqs = [encode([line], vocab) for line in lines]
    seqs = [np.concatenate([[vocab.eos_id], s]) for s in seqs]
    for start in range(0, len(seqs), batch_size):
        group = seqs[start:start + batch_size]
        width = max(len(s) for s in group) - 1
        inputs = np.full((len(group), width), vocab.eos_id, dtype=np.int64)
        targets = np.full((len(group), width), vocab.eos_id, dtype=np.int64)
        valid = np.zeros((len(group), width), dtype=bool)
        for row, s in enumerate(group):
            inputs[row, : len(s) - 1] = s[:-1]
            targets[row, : len(s) - 1] = s[1:]
            valid[row, : len(s) - 1] = True
        yield inputs, targets, valid


def _stream_batches(ids: np.ndarray, batch_size: int):
    """Contiguous rows of the whole stream; every row starts from a zero state."""
    if ids.size < batch_size + 1:
        raise ValueError("insufficient tokens for evaluation")
    row_len = (ids.size - 1) // batch_size
    inputs = ids[: batch_size * row_len].reshape(batch_size, row_len)
    targets = ids[1: batch_size * row_len + 1].reshape(batch_size, row_len)
    yield inputs, targets, np.ones_like(inputs, dtype=bool)


def evaluate(model: RecurrentLM, vocab: Vocabulary, lines, batch_size: int = 1, seq_len: int = 35,
             eval_seed: int = 0, mode: str = "stream") -> EvalReport:
    """Corpus perplexity ``2 ** mean(-log2 p(gold))`` with state carried across chunks.

    ``mode="stream"`` treats the corpus as one token stream (split into
    ``batch_size`` contiguous rows). ``mode="sentence"`` scores every sentence
    on its own from a zero state, with ``<eos>`` as the first input; its result
    does not depend on ``batch_size``.
    """
    if len(vocab) != model.vocab_size:
        raise ValueError(f"vocabulary mismatch: corpus vocabulary has {len(vocab)} entries, model {model.vocab_size}")
    lines = list(lines)
    signal_rng = np.random.default_rng(eval_seed)
    if mode == "stream":
        batches = _stream_batches(encode(lines, vocab), batch_size)
    elif mode == "sentence":
        batches = _sentence_batches(lines, vocab, batch_size)
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    total_nll_bits = 0.0
    count = 0
    batch_losses = []
    start = time.perf_counter()
    for inputs, targets, valid in batches:
        state = model.initial_state(inputs.shape[0])
        for t0 in range(0, inputs.shape[1], seq_len):
            sl = slice(t0, t0 + seq_len)
            result = model.forward(inputs[:, sl], targets[:, sl], state, signal_rng=signal_rng)
            state = result.final_state
            gold = result.gold_probs("prediction").T
            bits = -np.log2(np.maximum(gold, 1e-12))[valid[:, sl]]
            total_nll_bits += float(np.sum(bits))
            count += bits.size
            batch_losses.append(float(np.mean(bits)) * math.log(2.0) if bits.size else 0.0)
    elapsed = max(time.perf_counter() - start, 1e-12)
    ppl = float(2.0 ** (total_nll_bits / count))
    return EvalReport(ppl, count, batch_losses, count / elapsed, eval_seed, mode)


# -- traces -------------------------------------------------------------------

def trace(model: RecurrentLM, vocab: Vocabulary, sentences, recode_at: Iterable[int] | None = None,
          eval_seed: int = 0) -> list[TraceRecord]:
    """Per-token surprisal and error signal before and after recoding.

    Each sentence starts from a zero state with ``<eos>`` as context, so every
    word (and the closing ``<eos>``) gets a record. ``recode_at`` holds 0-based
    positions within a sentence; ``None`` recodes everywhere. Post-recoding
    values come from re-decoding the recoded state and are never used as
    predictions in surprisal mode.
    """
    if len(vocab) != model.vocab_size:
        raise ValueError("vocabulary mismatch between model and trace vocabulary")
    recode_steps = None if recode_at is None else set(recode_at)
    tracer = model
    if not model.recoding.enabled:
        # report the configured signal without ever applying it
        recode_steps = set()
        if model.recoding.signal != "bae" or model.params.has_ensemble:
            tracer = RecurrentLM(model.params, dataclasses.replace(model.recoding, enabled=True))
    signal_rng = np.random.default_rng(eval_seed)
    records: list[TraceRecord] = []
    for index, sentence in enumerate(sentences):
        ids = np.concatenate([[vocab.eos_id], encode([sentence], vocab)])
        inputs, targets = ids[None, :-1], ids[None, 1:]
        result = tracer.forward(inputs, targets, signal_rng=signal_rng, recode_steps=recode_steps,
                                post_deltas=True)
        pre = result.gold_probs("pre")[:, 0]
        post = result.gold_probs("post")[:, 0]
        for t, step in enumerate(result.steps):
            delta = np.nan if step.delta is None else float(step.delta[0])
            post_delta = np.nan if step.delta_post is None else float(step.delta_post[0])
            records.append(TraceRecord(
                sentence=index, position=t, token=vocab.id_to_token[int(targets[0, t])],
                surprisal_bits=float(-np.log2(max(pre[t], 1e-12))), delta=delta,
                post_surprisal_bits=float(-np.log2(max(post[t], 1e-12))), post_delta=post_delta,
                recoded=bool(step.recoded),
            ))
    return records


def trace_perplexity(records: Sequence[TraceRecord], use_post: bool) -> float:
    """Perplexity implied by trace records (``use_post`` for entropy-signal models)."""
    bits = [r.post_surprisal_bits if use_post else r.surprisal_bits for r in records]
    return float(2.0 ** np.mean(bits))


def write_trace_csv(records: Sequence[TraceRecord], handle) -> None:
    writer = csv.DictWriter(handle, fieldnames=TRACE_FIELDS)
    writer.writeheader()
    for rec in records:
        writer.writerow(dataclasses.asdict(rec))


# -- ablation -----------------------------------------------------------------

def with_recoding(model: RecurrentLM, recoding: RecodingConfig, seed: int = 0) -> tuple[RecurrentLM, list[str]]:
    """Same weights under a different recoder; initialises missing ensemble members if needed."""
    notes = []
    params = model.params
    if recoding.enabled and recoding.signal == "bae" and not params.has_ensemble:
        ensemble = init_ensemble(params.vocab_size, params.hidden_size, recoding.k, recoding.prior_scale,
                                 recoding.weight_decay, np.random.default_rng(seed), recoding.per_member_anchors)
        arrays, buffers = ensemble_arrays(ensemble)
        params = LmParameters({**params.arrays, **arrays}, {**params.buffers, **buffers})
        notes.append("bae ensemble initialised fresh from config (model was trained without one)")
    return RecurrentLM(params, recoding), notes


def ablate(model: RecurrentLM, vocab: Vocabulary, lines, mode: str, signal: str | None = None,
           alpha: float | None = None, batch_size: int = 1, seq_len: int = 35, eval_seed: int = 0,
           strict: bool = False) -> EvalReport:
    """Evaluate with the recoder removed (``strip``) or attached at test time only (``graft``).

    With ``strict`` grafting a bae recoder onto a model without ensemble
    decoders is an error instead of initialising a fresh ensemble.
    """
    if mode == "strip":
        variant = RecurrentLM(model.params, dataclasses.replace(model.recoding, enabled=False))
        notes = ["recoder stripped"]
    elif mode == "graft":
        if signal is None:
            raise ValueError("graft needs a signal kind")
        if strict and signal == "bae" and not model.params.has_ensemble:
            raise ValueError("model has no ensemble decoders to graft a bae recoder onto")
        recoding = dataclasses.replace(model.recoding, enabled=True, signal=signal, step_kind="fixed",
                                       alpha=alpha, alpha_overrides={})
        variant, notes = with_recoding(model, recoding, seed=eval_seed)
        notes = [f"grafted {signal} recoder, fixed step {recoding.base_alpha:g}", *notes]
    else:
        raise ValueError(f"unknown ablation mode {mode!r}")
    report = evaluate(variant, vocab, lines, batch_size=batch_size, seq_len=seq_len, eval_seed=eval_seed)
    report.notes.extend(notes)
    return report

