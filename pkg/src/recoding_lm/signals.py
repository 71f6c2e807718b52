"""Error signals that drive recoding, with their closed-form gradients.

All gradients here are taken with respect to the decoder input (the top-layer
hidden state as the decoder sees it). Inputs may be a single vector ``(N,)`` or
a batch ``(B, N)``; outputs follow the same convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .functional import PROB_EPS, entropy, safe_log, softmax

SURPRISAL_MAX = float(np.exp(np.exp(-1.0)) - 1.0)


@dataclass
class SignalOutput:
    delta: np.ndarray
    top_grad: np.ndarray
    aux_probs: np.ndarray
    masks: np.ndarray | None = None


@dataclass
class EnsembleDecoders:
    """K decoder replicas with fixed anchor points.

    ``anchors`` has a leading axis of 1 when all members share a single anchor.
    """

    weights: np.ndarray
    biases: np.ndarray
    anchors: np.ndarray
    prior_scale: float
    weight_decay: float

    def __post_init__(self):
        if self.weights.ndim != 3 or self.weights.shape[0] < 1:
            raise ValueError("ensemble weights must have shape (K, V, N) with K >= 1")
        if self.anchors.shape[0] not in (1, self.weights.shape[0]) or self.anchors.shape[1:] != self.weights.shape[1:]:
            raise ValueError("anchor shape does not match ensemble weights")

    @property
    def size(self) -> int:
        return self.weights.shape[0]


def init_ensemble(vocab_size: int, hidden_size: int, k: int, prior_scale: float, weight_decay: float,
                  rng: np.random.Generator, per_member_anchors: bool = False) -> EnsembleDecoders:
    """Draw member weights and anchors from N(0, prior_scale^2); biases start at zero."""
    weights = rng.normal(0.0, prior_scale, size=(k, vocab_size, hidden_size))
    anchors = rng.normal(0.0, prior_scale, size=(k if per_member_anchors else 1, vocab_size, hidden_size))
    return EnsembleDecoders(weights, np.zeros((k, vocab_size)), anchors, prior_scale, weight_decay)


def _batched(h):
    h = np.asarray(h, dtype=np.float64)
    return (h[None, :], True) if h.ndim == 1 else (h, False)


def surprisal(gold_prob):
    """``p ** -p - 1``: zero at p = 1, peaking at p = 1/e."""
    p = np.maximum(np.asarray(gold_prob, dtype=np.float64), PROB_EPS)
    return np.exp(-p * np.log(p)) - 1.0


def surprisal_signal(probs, gold, decoder_w) -> SignalOutput:
    """Gold-token surprisal and its gradient through softmax and the decoder.

    The only nonzero entry of d(delta)/d(probs) is at the gold index, so the
    softmax Jacobian product collapses to ``s * p_gold * (onehot - probs)``.
    """
    probs, single = _batched(probs)
    gold = np.atleast_1d(np.asarray(gold))
    rows = np.arange(probs.shape[0])
    p_gold = probs[rows, gold]
    delta = surprisal(p_gold)
    scale = -(safe_log(p_gold) + 1.0) * (delta + 1.0) * p_gold
    u = -probs * scale[:, None]
    u[rows, gold] += scale
    grad = u @ decoder_w
    if single:
        return SignalOutput(delta[0], grad[0], probs[0])
    return SignalOutput(delta, grad, probs)


def member_entropy_signal(h, member_w, member_b) -> SignalOutput:
    """Entropy of the averaged member distribution and its gradient w.r.t. ``h``.

    ``member_w`` is ``(K, V, N)``; ``member_b`` is ``(V,)`` or ``(K, V)``.
    """
    h, single = _batched(h)
    k = member_w.shape[0]
    logits = np.einsum("kvn,bn->bkv", member_w, h) + member_b
    probs = softmax(logits, axis=-1)
    mean = probs.mean(axis=1)
    delta = entropy(mean)
    v = -(safe_log(mean) + 1.0)
    u = probs * v[:, None, :] - probs * np.sum(probs * v[:, None, :], axis=-1, keepdims=True)
    grad = np.einsum("bkv,kvn->bn", u, member_w) / k
    if single:
        return SignalOutput(delta[0], grad[0], probs[0])
    return SignalOutput(delta, grad, probs)


def draw_dropout_masks(k: int, shape: tuple[int, int], p: float, rng: np.random.Generator) -> np.ndarray:
    """Keep each decoder weight with probability ``1 - p`` (no rescaling)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if k < 1:
        raise ValueError("need at least one sample")
    return (rng.random((k, *shape)) >= p).astype(np.float64)


def mcd_signal(h, decoder_w, decoder_b, k: int, p: float, rng: np.random.Generator | None = None,
               masks: np.ndarray | None = None) -> SignalOutput:
    """Approximate predictive entropy from ``k`` dropout-masked decoders.

    Pass ``masks`` to re-evaluate under frozen masks (finite differences,
    post-recoding signals); otherwise they are drawn from ``rng``.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if masks is None:
        if rng is None:
            raise ValueError("mcd_signal needs an rng or frozen masks")
        masks = draw_dropout_masks(k, decoder_w.shape, p, rng)
    out = member_entropy_signal(h, decoder_w[None] * masks, decoder_b)
    out.masks = masks
    return out


def bae_signal(h, ensemble: EnsembleDecoders) -> SignalOutput:
    return member_entropy_signal(h, ensemble.weights, ensemble.biases)


def anchor_loss(ensemble: EnsembleDecoders, n_tokens: int) -> np.ndarray:
    """Per-member ``(1/N) * ||sqrt(lambda) (W_k - W0_k)||`` (Frobenius norm, not squared)."""
    diff = ensemble.weights - ensemble.anchors
    norms = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
    return np.sqrt(ensemble.weight_decay) * norms / n_tokens


def anchor_loss_grad(ensemble: EnsembleDecoders, n_tokens: int) -> np.ndarray:
    """Gradient of ``sum_k anchor_loss_k`` w.r.t. member weights; zero where ``W_k == W0_k``."""
    diff = ensemble.weights - ensemble.anchors
    norms = np.sqrt(np.sum(diff * diff, axis=(1, 2)))
    safe = np.where(norms > 0, norms, 1.0)
    coef = np.where(norms > 0, np.sqrt(ensemble.weight_decay) / (n_tokens * safe), 0.0)
    return coef[:, None, None] * diff


def amortized_total_loss(ce_losses, anchor_losses) -> float:
    ce_losses = np.asarray(ce_losses, dtype=np.float64)
    anchor_losses = np.asarray(anchor_losses, dtype=np.float64)
    if ce_losses.shape != anchor_losses.shape or ce_losses.ndim != 1:
        raise ValueError("need one cross-entropy and one anchor loss per member")
    return float(np.mean(ce_losses + anchor_losses))
