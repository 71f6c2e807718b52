"""Recoding: a gradient step on the activations, ``h' = h - alpha * grad``.

Both hidden and cell activations of every layer are recoded, each with its own
step size. Step sizes are fixed constants, learned scalars (softplus of a raw
parameter) or predicted per example by a small feed-forward net that reads the
layer's hidden activation as a constant input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ACTIVATION_KINDS, RecodingConfig
from .functional import relu, sigmoid, softplus
from .lstm import CellCache, LmParameters


def recode(activation, grad, alpha):
    """``activation - alpha * grad``; ``alpha`` is a scalar or one value per batch row."""
    activation = np.asarray(activation, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if activation.shape != grad.shape:
        raise ValueError(f"shape mismatch: activation {activation.shape} vs grad {grad.shape}")
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.any(alpha < 0):
        raise ValueError("step size must be non-negative")
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    return activation - alpha * grad


def inverse_softplus(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus output is strictly positive")
    # log(expm1(y)) loses precision for large y
    return float(y + np.log(-np.expm1(-y)))


def step_param_name(layer: int, kind: str) -> str:
    return f"step.{layer}.{kind}.raw"


def predictor_prefix(layer: int, kind: str) -> str:
    return f"predictor.{layer}.{kind}"


@dataclass
class StepSizeStrategy:
    kind: str = "fixed"
    fixed: dict[tuple[int, str], float] = field(default_factory=dict)

    @classmethod
    def from_config(cls, config: RecodingConfig, num_layers: int) -> "StepSizeStrategy":
        fixed = {(layer, k): config.alpha_for(layer, k) for layer in range(num_layers) for k in ACTIVATION_KINDS}
        return cls(config.step_kind, fixed)

    def trainable(self) -> bool:
        return self.kind in ("learned", "predicted")


def init_step_parameters(config: RecodingConfig, num_layers: int, hidden_size: int,
                         rng: np.random.Generator, init_range: float = 0.1) -> dict[str, np.ndarray]:
    """Learned raw values, or predictor weights, starting at the configured step size."""
    arrays: dict[str, np.ndarray] = {}
    if config.step_kind == "fixed":
        return arrays
    for layer in range(num_layers):
        for kind in ACTIVATION_KINDS:
            alpha = config.alpha_for(layer, kind)
            start = inverse_softplus(alpha) if alpha > 0 else -20.0
            if config.step_kind == "learned":
                arrays[step_param_name(layer, kind)] = np.array(start)
            else:
                w1, w2 = config.predictor_hidden
                pre = predictor_prefix(layer, kind)
                arrays[f"{pre}.w1"] = rng.uniform(-init_range, init_range, size=(w1, hidden_size))
                arrays[f"{pre}.b1"] = rng.uniform(-init_range, init_range, size=w1)
                arrays[f"{pre}.w2"] = rng.uniform(-init_range, init_range, size=(w2, w1))
                arrays[f"{pre}.b2"] = rng.uniform(-init_range, init_range, size=w2)
                arrays[f"{pre}.w3"] = rng.uniform(-init_range, init_range, size=(1, w2))
                arrays[f"{pre}.b3"] = np.array([start])
    return arrays


@dataclass
class PredictorCache:
    h: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    u: np.ndarray


def predictor_forward(params: LmParameters, layer: int, kind: str, h) -> tuple[np.ndarray, PredictorCache]:
    """Pre-softplus output ``u`` (one per row) of the step-size predictor."""
    pre = predictor_prefix(layer, kind)
    h = np.atleast_2d(h)
    z1 = h @ params[f"{pre}.w1"].T + params[f"{pre}.b1"]
    a1 = relu(z1)
    z2 = a1 @ params[f"{pre}.w2"].T + params[f"{pre}.b2"]
    a2 = relu(z2)
    u = (a2 @ params[f"{pre}.w3"].T + params[f"{pre}.b3"])[:, 0]
    return u, PredictorCache(h, z1, a1, z2, a2, u)


def predictor_backward(params: LmParameters, layer: int, kind: str, cache: PredictorCache,
                       du: np.ndarray, grads: dict[str, np.ndarray]) -> None:
    """Accumulate predictor weight grads; nothing flows back into ``h``."""
    pre = predictor_prefix(layer, kind)
    d_out = du[:, None]
    grads[f"{pre}.w3"] += d_out.T @ cache.a2
    grads[f"{pre}.b3"] += d_out.sum(axis=0)
    dz2 = (d_out @ params[f"{pre}.w3"]) * (cache.z2 > 0)
    grads[f"{pre}.w2"] += dz2.T @ cache.a1
    grads[f"{pre}.b2"] += dz2.sum(axis=0)
    dz1 = (dz2 @ params[f"{pre}.w2"]) * (cache.z1 > 0)
    grads[f"{pre}.w1"] += dz1.T @ cache.h
    grads[f"{pre}.b1"] += dz1.sum(axis=0)


def step_size(strategy: StepSizeStrategy, layer: int, kind: str, h=None,
              params: LmParameters | None = None):
    """Effective step size: a float for fixed/learned, one value per row when predicted."""
    if strategy.kind == "fixed":
        return float(strategy.fixed[(layer, kind)])
    if params is None:
        raise ValueError(f"{strategy.kind} step sizes need model parameters")
    if strategy.kind == "learned":
        return float(softplus(params[step_param_name(layer, kind)]))
    u, _ = predictor_forward(params, layer, kind, h)
    return softplus(u)


@dataclass
class RecodingGradients:
    g_h: list[np.ndarray]
    g_c: list[np.ndarray]


def _input_grad(cache: CellCache, dh: np.ndarray, w_x: np.ndarray) -> np.ndarray:
    dc = dh * cache.o * (1.0 - cache.tanh_c ** 2)
    da = np.concatenate([
        dc * cache.c_prev * cache.f * (1.0 - cache.f),
        dc * cache.g * cache.i * (1.0 - cache.i),
        dh * cache.tanh_c * cache.o * (1.0 - cache.o),
        dc * cache.i * (1.0 - cache.g ** 2),
    ], axis=1)
    return da @ w_x


def signal_gradients(top_grad, caches: list[CellCache], params: LmParameters) -> RecodingGradients:
    """Spread the top-layer signal gradient to every layer's ``h`` and ``c`` of the same step.

    The cell gradient is the derivative through ``h = o * tanh(c)`` with the
    output gate held at its value; lower layers are reached through the upper
    layer's input. No terms from earlier time steps are involved.
    """
    if not caches:
        raise ValueError("missing forward caches for this step")
    num_layers = len(caches)
    g_h: list[np.ndarray] = [None] * num_layers  # type: ignore[list-item]
    g_c: list[np.ndarray] = [None] * num_layers  # type: ignore[list-item]
    g = np.atleast_2d(np.asarray(top_grad, dtype=np.float64))
    for layer in range(num_layers - 1, -1, -1):
        cache = caches[layer]
        g_h[layer] = g
        g_c[layer] = g * cache.o * (1.0 - cache.tanh_c ** 2)
        if layer > 0:
            g = _input_grad(cache, g, params.layer(layer)[0])
    return RecodingGradients(g_h, g_c)


def apply_recoding(states: list[tuple[np.ndarray, np.ndarray]], grads: RecodingGradients,
                   alphas: dict[tuple[int, str], object]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Recode each layer's ``(h, c)`` with its own step size."""
    if len(states) != len(grads.g_h):
        raise ValueError("state and gradient layer counts differ")
    return [
        (recode(h, grads.g_h[layer], alphas[(layer, "h")]), recode(c, grads.g_c[layer], alphas[(layer, "c")]))
        for layer, (h, c) in enumerate(states)
    ]
