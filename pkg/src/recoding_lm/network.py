"""Stacked LSTM language model with an optional recoder between time steps.

At each step the full layer stack runs on the carried (possibly recoded)
state, the top hidden state is decoded, the error signal and its gradient are
computed, and every layer's ``h``/``c`` is recoded before the next step reads it.

Loss wiring depends on the signal. Surprisal recoding has seen the gold token,
so its loss uses the distribution decoded *before* recoding. Entropy signals
(``mcd``, ``bae``) never look at the gold token and their loss uses the
distribution re-decoded from the recoded top state. With ``bae`` the ensemble
members are also trained on the re-decoded state with the amortized anchor loss.

Backprop treats each recoding gradient as a constant vector, so gradients reach
the step sizes through ``h' = h - alpha * g`` but never pass through ``g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ACTIVATION_KINDS, RecodingConfig
from .functional import PROB_EPS, sigmoid, softmax, softplus
from .lstm import CellCache, LmParameters, init_lstm_parameters, lstm_step, lstm_step_backward
from .recoder import (
    PredictorCache,
    RecodingGradients,
    StepSizeStrategy,
    init_step_parameters,
    predictor_backward,
    predictor_forward,
    recode,
    signal_gradients,
    step_param_name,
)
from .signals import (
    EnsembleDecoders,
    SignalOutput,
    amortized_total_loss,
    anchor_loss,
    anchor_loss_grad,
    bae_signal,
    init_ensemble,
    mcd_signal,
    surprisal_signal,
)

State = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class StepRecord:
    ids: np.ndarray
    caches: list[CellCache]
    z_pre: np.ndarray
    z_post: np.ndarray
    probs_pre: np.ndarray
    probs_post: np.ndarray
    member_probs_post: np.ndarray | None = None
    recoded: bool = False
    grads: RecodingGradients | None = None
    alphas: dict[tuple[int, str], object] = field(default_factory=dict)
    predictor_caches: dict[tuple[int, str], PredictorCache] = field(default_factory=dict)
    masks: np.ndarray | None = None
    delta: np.ndarray | None = None
    delta_post: np.ndarray | None = None


@dataclass
class ForwardResult:
    steps: list[StepRecord]
    targets: np.ndarray | None
    final_state: State
    dropout_mask: np.ndarray
    loss_on_post: bool
    member_loss: bool
    n_tokens: int
    loss: float | None = None
    token_nll: np.ndarray | None = None

    def gold_probs(self, which: str = "prediction") -> np.ndarray:
        """``(T, B)`` gold-token probabilities from the pre, post or loss-side distribution."""
        if self.targets is None:
            raise ValueError("no targets were given to the forward pass")
        post = which == "post" or (which == "prediction" and self.loss_on_post)
        out = np.empty(self.targets.T.shape)
        for t, step in enumerate(self.steps):
            probs = step.probs_post if post else step.probs_pre
            out[t] = probs[np.arange(probs.shape[0]), self.targets[:, t]]
        return out

    def deltas(self, post: bool = False) -> np.ndarray:
        return np.stack([s.delta_post if post else s.delta for s in self.steps])


class RecurrentLM:
    """Parameters plus the recoding setup that decides how a forward pass behaves."""

    def __init__(self, params: LmParameters, recoding: RecodingConfig | None = None):
        self.params = params
        self.recoding = recoding if recoding is not None else RecodingConfig()
        self.recoding.validate()
        if self.recoding.enabled and self.recoding.signal == "bae" and not params.has_ensemble:
            raise ValueError("bae recoding needs ensemble decoders; initialise them first")
        self.strategy = StepSizeStrategy.from_config(self.recoding, params.num_layers)
        if self.recoding.enabled and self.strategy.trainable():
            missing = [k for k in self._step_param_names() if k not in params]
            if missing:
                raise ValueError(f"{self.strategy.kind} step sizes need parameters {missing[:2]}...")

    @classmethod
    def initialize(cls, vocab_size: int, embedding_size: int, hidden_size: int, num_layers: int,
                   recoding: RecodingConfig | None = None, seed: int = 0,
                   init_range: float = 0.1) -> "RecurrentLM":
        recoding = recoding if recoding is not None else RecodingConfig()
        rng = np.random.default_rng(seed)
        arrays = init_lstm_parameters(vocab_size, embedding_size, hidden_size, num_layers, rng, init_range)
        buffers = {}
        if recoding.enabled:
            arrays.update(init_step_parameters(recoding, num_layers, hidden_size, rng, init_range))
            if recoding.signal == "bae":
                arrays_e, buffers = ensemble_arrays(init_ensemble(
                    vocab_size, hidden_size, recoding.k, recoding.prior_scale, recoding.weight_decay,
                    rng, recoding.per_member_anchors))
                arrays.update(arrays_e)
        return cls(LmParameters(arrays, buffers), recoding)

    # -- structure -------------------------------------------------------

    @property
    def num_layers(self) -> int:
        return self.params.num_layers

    @property
    def hidden_size(self) -> int:
        return self.params.hidden_size

    @property
    def vocab_size(self) -> int:
        return self.params.vocab_size

    def _step_param_names(self) -> list[str]:
        if self.strategy.kind == "learned":
            return [step_param_name(l, k) for l in range(self.num_layers) for k in ACTIVATION_KINDS]
        if self.strategy.kind == "predicted":
            return [f"predictor.{l}.{k}.w1" for l in range(self.num_layers) for k in ACTIVATION_KINDS]
        return []

    def ensemble(self) -> EnsembleDecoders:
        return EnsembleDecoders(self.params["ensemble.w"], self.params["ensemble.b"],
                                self.params.buffers["ensemble.anchor"],
                                self.recoding.prior_scale, self.recoding.weight_decay)

    def initial_state(self, batch_size: int) -> State:
        n = self.hidden_size
        return [(np.zeros((batch_size, n)), np.zeros((batch_size, n))) for _ in range(self.num_layers)]

    @property
    def loss_on_post(self) -> bool:
        return self.recoding.enabled and self.recoding.signal in ("mcd", "bae")

    # -- pieces of a step --------------------------------------------------

    def decode(self, z) -> np.ndarray:
        return softmax(np.atleast_2d(z) @ self.params["decoder.w"].T + self.params["decoder.b"])

    def member_probs(self, z) -> np.ndarray:
        logits = np.einsum("kvn,bn->bkv", self.params["ensemble.w"], np.atleast_2d(z))
        return softmax(logits + self.params["ensemble.b"], axis=-1)

    def signal(self, z, gold=None, rng: np.random.Generator | None = None,
               masks: np.ndarray | None = None, probs: np.ndarray | None = None) -> SignalOutput:
        """Error signal of decoder input ``z`` and its gradient with respect to ``z``."""
        kind = self.recoding.signal
        if kind == "surprisal":
            if gold is None:
                raise ValueError("surprisal recoding needs gold tokens")
            return surprisal_signal(self.decode(z) if probs is None else probs, gold, self.params["decoder.w"])
        if kind == "mcd":
            return mcd_signal(z, self.params["decoder.w"], self.params["decoder.b"],
                              self.recoding.k, self.recoding.mc_dropout, rng=rng, masks=masks)
        return bae_signal(z, self.ensemble())

    def step_sizes(self, states: State) -> tuple[dict, dict]:
        alphas: dict[tuple[int, str], object] = {}
        caches: dict[tuple[int, str], PredictorCache] = {}
        for layer in range(self.num_layers):
            for kind in ACTIVATION_KINDS:
                if self.strategy.kind == "fixed":
                    alphas[(layer, kind)] = self.strategy.fixed[(layer, kind)]
                elif self.strategy.kind == "learned":
                    alphas[(layer, kind)] = float(softplus(self.params[step_param_name(layer, kind)]))
                else:
                    u, cache = predictor_forward(self.params, layer, kind, states[layer][0])
                    alphas[(layer, kind)] = softplus(u)
                    caches[(layer, kind)] = cache
        return alphas, caches

    # -- forward / backward ------------------------------------------------

    def forward(self, ids, targets=None, state: State | None = None, dropout_mask=None,
                signal_rng: np.random.Generator | None = None, recode_steps=None,
                replay: ForwardResult | None = None, member_loss: bool = False,
                n_tokens: int = 1, post_deltas: bool = False) -> ForwardResult:
        """Run a ``(B, T)`` chunk.

        ``recode_steps`` limits recoding to the given step indices (default all).
        ``replay`` reuses the recoding gradients, predictor inputs and dropout
        masks of an earlier pass, which is what finite-difference checks need.
        """
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        batch, steps = ids.shape
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError("token id out of range")
        if targets is not None:
            targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
            if targets.shape != ids.shape:
                raise ValueError("targets must match ids")
            if targets.min() < 0 or targets.max() >= self.vocab_size:
                raise IndexError("target id out of range")
        state = self.initial_state(batch) if state is None else [(h.copy(), c.copy()) for h, c in state]
        mask = np.ones((batch, self.hidden_size)) if dropout_mask is None else dropout_mask
        enabled = self.recoding.enabled
        if enabled and self.recoding.signal == "mcd" and signal_rng is None and replay is None:
            signal_rng = np.random.default_rng(0)
        member_loss = member_loss and enabled and self.recoding.signal == "bae"
        emb = self.params["embedding"]
        top = self.num_layers - 1
        records: list[StepRecord] = []

        for t in range(steps):
            x = emb[ids[:, t]]
            caches = []
            new_state = []
            for layer in range(self.num_layers):
                h, c, cache = lstm_step(x, *state[layer], *self.params.layer(layer))
                caches.append(cache)
                new_state.append((h, c))
                x = h
            z = mask * new_state[top][0]
            probs = self.decode(z)
            rec = StepRecord(ids[:, t], caches, z, z, probs, probs)
            gold = None if targets is None else targets[:, t]

            if enabled:
                prior = replay.steps[t] if replay is not None else None
                recode_now = prior.recoded if prior is not None else (recode_steps is None or t in recode_steps)
                if prior is not None:
                    rec.masks = prior.masks
                    rec.delta = prior.delta
                    grads = prior.grads
                else:
                    sig = self.signal(z, gold, rng=signal_rng, probs=probs)
                    rec.masks = sig.masks
                    rec.delta = np.atleast_1d(sig.delta)
                    grads = signal_gradients(mask * np.atleast_2d(sig.top_grad), caches, self.params) if recode_now else None
                if recode_now:
                    # predictor inputs are constants; a replay reuses the recorded ones
                    pred_state = [(c.h, None) for c in prior.caches] if prior is not None else new_state
                    alphas, pcaches = self.step_sizes(pred_state)
                    new_state = [
                        (recode(h, grads.g_h[l], alphas[(l, "h")]), recode(c, grads.g_c[l], alphas[(l, "c")]))
                        for l, (h, c) in enumerate(new_state)
                    ]
                    rec.recoded = True
                    rec.grads = grads
                    rec.alphas = alphas
                    rec.predictor_caches = pcaches
                    rec.z_post = mask * new_state[top][0]
                    rec.probs_post = self.decode(rec.z_post)
                    if post_deltas and prior is None:
                        rec.delta_post = np.atleast_1d(
                            self.signal(rec.z_post, gold, masks=rec.masks, probs=rec.probs_post).delta)
                else:
                    rec.delta_post = rec.delta
                if post_deltas and rec.delta_post is None:
                    rec.delta_post = rec.delta
                if member_loss:
                    rec.member_probs_post = self.member_probs(rec.z_post)
            records.append(rec)
            state = new_state

        result = ForwardResult(records, targets, state, mask, self.loss_on_post, member_loss, n_tokens)
        if targets is not None:
            self._compute_loss(result)
        return result

    def _compute_loss(self, result: ForwardResult) -> None:
        gold = result.gold_probs("prediction")
        result.token_nll = -np.log(np.maximum(gold, PROB_EPS))
        loss = float(np.mean(result.token_nll))
        if result.member_loss:
            ce = np.zeros(self.params["ensemble.w"].shape[0])
            for t, step in enumerate(result.steps):
                rows = np.arange(step.member_probs_post.shape[0])
                p = step.member_probs_post[rows, :, result.targets[:, t]]
                ce += -np.log(np.maximum(p, PROB_EPS)).sum(axis=0)
            ce /= result.targets.size
            loss += amortized_total_loss(ce, anchor_loss(self.ensemble(), result.n_tokens))
        result.loss = loss

    def backward(self, result: ForwardResult) -> dict[str, np.ndarray]:
        """Exact gradients of ``result.loss``, truncated at the chunk start."""
        if result.targets is None or result.loss is None:
            raise ValueError("missing cache: forward pass was run without targets")
        if not result.steps:
            raise ValueError("missing cache: empty forward result")
        params = self.params
        grads = params.zeros_like()
        batch = result.targets.shape[0]
        scale = 1.0 / result.targets.size
        mask = result.dropout_mask
        top = self.num_layers - 1
        w_dec = params["decoder.w"]
        zero = np.zeros((batch, self.hidden_size))
        dh_next = [zero] * self.num_layers
        dc_next = [zero] * self.num_layers
        rows = np.arange(batch)
        if result.member_loss:
            k = params["ensemble.w"].shape[0]
            grads["ensemble.w"] += anchor_loss_grad(self.ensemble(), result.n_tokens) / k

        for t in range(len(result.steps) - 1, -1, -1):
            step = result.steps[t]
            gold = result.targets[:, t]
            dh_post = list(dh_next)
            dc_post = list(dc_next)
            probs = step.probs_post if result.loss_on_post else step.probs_pre
            dlogits = probs.copy()
            dlogits[rows, gold] -= 1.0
            dlogits *= scale
            z = step.z_post if result.loss_on_post else step.z_pre
            grads["decoder.w"] += dlogits.T @ z
            grads["decoder.b"] += dlogits.sum(axis=0)
            dz = dlogits @ w_dec
            if result.member_loss:
                member = step.member_probs_post.copy()
                member[rows, :, gold] -= 1.0
                member *= scale / member.shape[1]
                grads["ensemble.w"] += np.einsum("bkv,bn->kvn", member, step.z_post)
                grads["ensemble.b"] += member.sum(axis=0)
                dh_post[top] = dh_post[top] + mask * np.einsum("bkv,kvn->bn", member, params["ensemble.w"])
            if result.loss_on_post:
                dh_post[top] = dh_post[top] + mask * dz

            if step.recoded:
                self._step_size_backward(step, dh_post, dc_post, grads)
            dh = dh_post
            dc = dc_post
            if not result.loss_on_post:
                dh[top] = dh[top] + mask * dz

            for layer in range(top, -1, -1):
                w_x, w_h, _ = params.layer(layer)
                dx, dh_prev, dc_prev = lstm_step_backward(
                    step.caches[layer], dh[layer], dc[layer], w_x, w_h,
                    grads[f"layers.{layer}.w_x"], grads[f"layers.{layer}.w_h"], grads[f"layers.{layer}.b"])
                if layer > 0:
                    dh[layer - 1] = dh[layer - 1] + dx
                else:
                    np.add.at(grads["embedding"], step.ids, dx)
                dh_next[layer] = dh_prev
                dc_next[layer] = dc_prev
        return grads

    def _step_size_backward(self, step: StepRecord, dh_post, dc_post, grads) -> None:
        if self.strategy.kind == "fixed":
            return
        for layer in range(self.num_layers):
            for kind, upstream, g in (("h", dh_post[layer], step.grads.g_h[layer]),
                                      ("c", dc_post[layer], step.grads.g_c[layer])):
                d_alpha = -np.sum(upstream * g, axis=1)
                if self.strategy.kind == "learned":
                    name = step_param_name(layer, kind)
                    grads[name] += np.sum(d_alpha) * sigmoid(self.params[name])
                else:
                    cache = step.predictor_caches[(layer, kind)]
                    predictor_backward(self.params, layer, kind, cache, d_alpha * sigmoid(cache.u), grads)


def ensemble_arrays(ensemble: EnsembleDecoders) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    return ({"ensemble.w": ensemble.weights, "ensemble.b": ensemble.biases},
            {"ensemble.anchor": ensemble.anchors})


def make_dropout_mask(batch: int, hidden: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask for the decoder input, fixed for one chunk."""
    if rate <= 0:
        return np.ones((batch, hidden))
    return (rng.random((batch, hidden)) >= rate) / (1.0 - rate)
