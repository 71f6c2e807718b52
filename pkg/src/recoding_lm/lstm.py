"""LSTM cell, parameter container, loss and the clipped SGD update."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .functional import PROB_EPS, sigmoid

# row blocks of the stacked gate matrices
GATES = ("forget", "input", "output", "candidate")


class DivergenceError(FloatingPointError):
    """Non-finite loss or gradient during training."""


class ParameterError(ValueError):
    pass


class LmParameters:
    """Named float64 tensors of the language model.

    ``arrays`` are trained; ``buffers`` (ensemble anchors) are fixed after
    initialization. Per layer the four gate matrices are stacked row-wise in
    ``GATES`` order: ``layers.{l}.w_x`` is ``(4N, in)``, ``layers.{l}.w_h`` is
    ``(4N, N)`` and ``layers.{l}.b`` is ``(4N,)``.
    """

    def __init__(self, arrays: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None):
        self.arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.buffers = {k: np.asarray(v, dtype=np.float64) for k, v in (buffers or {}).items()}
        self._check()

    def _check(self) -> None:
        emb = self.arrays["embedding"]
        dec = self.arrays["decoder.w"]
        if emb.ndim != 2 or dec.ndim != 2 or dec.shape[0] != emb.shape[0]:
            raise ParameterError("embedding and decoder disagree on vocabulary size")
        n = self.hidden_size
        width = emb.shape[1]
        for layer in range(self.num_layers):
            w_x, w_h, b = self.layer(layer)
            if w_x.shape != (4 * n, width) or w_h.shape != (4 * n, n) or b.shape != (4 * n,):
                raise ParameterError(f"layer {layer} has inconsistent shapes")
            width = n
        if dec.shape[1] != n or self.arrays["decoder.b"].shape != (dec.shape[0],):
            raise ParameterError("decoder shape does not match hidden size")

    @property
    def vocab_size(self) -> int:
        return self.arrays["embedding"].shape[0]

    @property
    def embedding_size(self) -> int:
        return self.arrays["embedding"].shape[1]

    @property
    def hidden_size(self) -> int:
        return self.arrays["decoder.w"].shape[1]

    @property
    def num_layers(self) -> int:
        return sum(1 for k in self.arrays if k.startswith("layers.") and k.endswith(".w_x"))

    @property
    def has_ensemble(self) -> bool:
        return "ensemble.w" in self.arrays

    def layer(self, layer: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.arrays
        return a[f"layers.{layer}.w_x"], a[f"layers.{layer}.w_h"], a[f"layers.{layer}.b"]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def copy(self) -> "LmParameters":
        return LmParameters({k: v.copy() for k, v in self.arrays.items()},
                            {k: v.copy() for k, v in self.buffers.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def init_lstm_parameters(vocab_size: int, embedding_size: int, hidden_size: int, num_layers: int,
                         rng: np.random.Generator, init_range: float = 0.1) -> dict[str, np.ndarray]:
    """Uniform(-init_range, init_range) weights, zero biases."""

    def uniform(*shape):
        return rng.uniform(-init_range, init_range, size=shape)

    arrays = {"embedding": uniform(vocab_size, embedding_size)}
    width = embedding_size
    for layer in range(num_layers):
        arrays[f"layers.{layer}.w_x"] = uniform(4 * hidden_size, width)
        arrays[f"layers.{layer}.w_h"] = uniform(4 * hidden_size, hidden_size)
        arrays[f"layers.{layer}.b"] = np.zeros(4 * hidden_size)
        width = hidden_size
    arrays["decoder.w"] = uniform(vocab_size, hidden_size)
    arrays["decoder.b"] = np.zeros(vocab_size)
    return arrays


@dataclass
class CellCache:
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    f: np.ndarray
    i: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


def lstm_step(x, h_prev, c_prev, w_x, w_h, b) -> tuple[np.ndarray, np.ndarray, CellCache]:
    """One LSTM update for a batch; ``x`` is ``(B, in)``, states ``(B, N)``."""
    x = np.atleast_2d(x)
    h_prev = np.atleast_2d(h_prev)
    c_prev = np.atleast_2d(c_prev)
    n = w_h.shape[1]
    if x.shape[1] != w_x.shape[1] or h_prev.shape[1] != n or c_prev.shape != h_prev.shape:
        raise ParameterError(
            f"dimension mismatch: x {x.shape}, h {h_prev.shape}, c {c_prev.shape}, "
            f"w_x {w_x.shape}, w_h {w_h.shape}")
    a = x @ w_x.T + h_prev @ w_h.T + b
    f = sigmoid(a[:, :n])
    i = sigmoid(a[:, n:2 * n])
    o = sigmoid(a[:, 2 * n:3 * n])
    g = np.tanh(a[:, 3 * n:])
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    return h, c, CellCache(x, h_prev, c_prev, f, i, o, g, c, tanh_c, h)


def lstm_step_backward(cache: CellCache, dh, dc, w_x, w_h, grads_w_x, grads_w_h, grads_b):
    """Backprop one cell step; accumulates weight grads in place.

    ``dh``/``dc`` are the total gradients on this step's outputs ``h`` and ``c``
    (the ``dc`` argument excludes the path through ``h``). Returns the gradients
    on ``x``, ``h_prev`` and ``c_prev``.
    """
    dc = dc + dh * cache.o * (1.0 - cache.tanh_c ** 2)
    d_o = dh * cache.tanh_c
    d_f = dc * cache.c_prev
    d_i = dc * cache.g
    d_g = dc * cache.i
    da = np.concatenate([
        d_f * cache.f * (1.0 - cache.f),
        d_i * cache.i * (1.0 - cache.i),
        d_o * cache.o * (1.0 - cache.o),
        d_g * (1.0 - cache.g ** 2),
    ], axis=1)
    grads_w_x += da.T @ cache.x
    grads_w_h += da.T @ cache.h_prev
    grads_b += da.sum(axis=0)
    return da @ w_x, da @ w_h, dc * cache.f


def cross_entropy(probs, targets) -> float:
    """Mean negative log-likelihood (nats) of ``targets`` under ``probs``.

    ``probs`` has the class axis last; ``targets`` matches its leading shape.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets)
    gold = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
    return float(-np.mean(np.log(np.maximum(gold, PROB_EPS))))


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_gradients(grads: dict[str, np.ndarray], clip: float) -> tuple[dict[str, np.ndarray], float]:
    """Rescale so the global L2 norm is at most ``clip``; returns (grads, original norm)."""
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise DivergenceError("divergence: non-finite gradient norm")
    if norm > clip:
        scale = clip / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


def sgd_step(params: LmParameters, grads: dict[str, np.ndarray], lr: float, clip: float) -> LmParameters:
    """Clip, then take a plain gradient step. Returns new parameters."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    grads, _ = clip_gradients(grads, clip)
    arrays = {k: v - lr * grads[k] if k in grads else v.copy() for k, v in params.arrays.items()}
    out = LmParameters(arrays, {k: v.copy() for k, v in params.buffers.items()})
    if not out.all_finite():
        raise DivergenceError("divergence: non-finite parameters after update")
    return out


def anneal_lr(history, lr: float) -> float:
    """Halve ``lr`` unless the latest validation perplexity strictly beats all earlier ones."""
    history = list(history)
    if not history:
        raise ValueError("history must be nonempty")
    if len(history) == 1:
        return lr
    return lr if history[-1] < min(history[:-1]) else lr / 2.0
