"""Independent numerical oracles for the analytic gradients and the descent guarantees.

Everything stochastic is frozen before an oracle runs: dropout masks, ensemble
members and, for the training loss, the recoding gradients themselves.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable

import numpy as np

from .config import RecodingConfig
from .functional import softmax
from .lstm import lstm_step
from .network import RecurrentLM, make_dropout_mask
from .recoder import signal_gradients
from .signals import bae_signal, draw_dropout_masks, mcd_signal, surprisal_signal

REL_FLOOR = 1e-8

Evaluator = Callable[[np.ndarray], tuple[float, np.ndarray]]


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), REL_FLOOR)


def finite_diff_grad(f: Callable[[np.ndarray], float], h, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a deterministic scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    h = np.array(h, dtype=np.float64)
    grad = np.zeros_like(h)
    flat = h.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = float(f(h))
        flat[i] = old - eps
        down = float(f(h))
        flat[i] = old
        if not (np.isfinite(up) and np.isfinite(down)):
            raise FloatingPointError(f"non-finite function value at coordinate {i}")
        out[i] = (up - down) / (2.0 * eps)
    return grad


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic_norm: float
    numeric_norm: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<40} max_rel_err={self.max_rel_err:.3e}  {status}"


def compare(name: str, analytic, numeric, tolerance: float = 1e-4) -> GradCheckReport:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = relative_error(analytic, numeric)
    worst = np.unravel_index(int(np.argmax(err)), err.shape) if err.size else ()
    return GradCheckReport(name, float(err.max()) if err.size else 0.0, tuple(int(i) for i in worst),
                           float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)), tolerance)


def estimate_lipschitz(f: Evaluator, samples, pairs=None) -> float:
    """Largest observed ``||grad f(x) - grad f(y)|| / ||x - y||`` over sample pairs.

    ``pairs`` lists index pairs into ``samples``; by default every pair is
    used. This is an empirical lower bound on the true gradient Lipschitz
    constant.
    """
    samples = [np.asarray(s, dtype=np.float64) for s in samples]
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    grads = [f(s)[1] for s in samples]
    best = None
    for i, j in (combinations(range(len(samples)), 2) if pairs is None else pairs):
        dist = np.linalg.norm(samples[i] - samples[j])
        if dist == 0:
            continue
        ratio = np.linalg.norm(grads[i] - grads[j]) / dist
        best = ratio if best is None else max(best, ratio)
    if best is None:
        raise ValueError("all samples are identical")
    return float(best)


@dataclass
class TheoremReport:
    delta_before: float
    delta_after: float
    bound: float
    bound_satisfied: bool
    alpha_used: float
    descent: bool
    # step size came from an estimated (lower-bound) Lipschitz constant
    heuristic: bool = False

    @property
    def improvement(self) -> float:
        return self.delta_before - self.delta_after


def check_theorem1(f: Evaluator, h, alpha: float | None = None, lipschitz: float | None = None,
                   atol: float = 1e-12, heuristic: bool = False) -> TheoremReport:
    """One recoding step on ``f`` at ``h`` against the guaranteed decrease ``||g||^2 / (2L)``.

    With only ``lipschitz`` given the step is ``1/L``. With only ``alpha`` the
    bound uses ``L = 1/alpha``.
    """
    h = np.asarray(h, dtype=np.float64)
    if alpha is None:
        if lipschitz is None or lipschitz <= 0:
            raise ValueError("need a step size or a positive Lipschitz estimate")
        alpha = 1.0 / lipschitz
    if lipschitz is None:
        lipschitz = 1.0 / alpha if alpha > 0 else np.inf
    before, grad = f(h)
    after, _ = f(h - alpha * grad)
    bound = float(np.dot(grad.ravel(), grad.ravel()) / (2.0 * lipschitz)) if np.isfinite(lipschitz) else 0.0
    improvement = float(before) - float(after)
    slack = atol * max(1.0, abs(bound))
    return TheoremReport(float(before), float(after), bound, improvement >= bound - slack, float(alpha),
                         float(after) <= float(before) + slack, heuristic)


# -- toy models and frozen signal evaluators ---------------------------------

TOY_SHAPE = dict(vocab_size=11, embedding_size=5, hidden_size=7, num_layers=2)


def toy_model(signal: str | None = None, seed: int = 0, alpha: float = 0.5, step_kind: str = "fixed",
              k: int = 3, mc_dropout: float = 0.42, init_range: float = 1.0) -> RecurrentLM:
    """The small seeded model the checks run on; ``signal=None`` disables recoding."""
    recoding = RecodingConfig(enabled=signal is not None, signal=signal or "surprisal", step_kind=step_kind,
                              alpha=alpha, k=k, mc_dropout=mc_dropout, predictor_hidden=(6, 4))
    return RecurrentLM.initialize(**TOY_SHAPE, recoding=recoding, seed=seed, init_range=init_range)


def signal_evaluator(model: RecurrentLM, gold: int | None = None, masks: np.ndarray | None = None,
                     rng: np.random.Generator | None = None) -> Evaluator:
    """``z -> (delta, grad)`` for one decoder input vector, with masks frozen for mcd."""
    kind = model.recoding.signal
    w, b = model.params["decoder.w"], model.params["decoder.b"]
    if kind == "surprisal":
        if gold is None:
            raise ValueError("surprisal needs a gold token")

        def f(z):
            out = surprisal_signal(softmax(z @ w.T + b), gold, w)
            return float(out.delta), out.top_grad
        return f
    if kind == "mcd":
        if masks is None:
            masks = draw_dropout_masks(model.recoding.k, w.shape, model.recoding.mc_dropout,
                                       rng or np.random.default_rng(0))

        def f(z):
            out = mcd_signal(z, w, b, model.recoding.k, model.recoding.mc_dropout, masks=masks)
            return float(out.delta), out.top_grad
        return f
    ensemble = model.ensemble()

    def f(z):
        out = bae_signal(z, ensemble)
        return float(out.delta), out.top_grad
    return f


def _upward_delta(model: RecurrentLM, caches, layer: int, kind: str, value, f: Evaluator) -> float:
    """Signal after replacing one activation of one step and re-running the layers above."""
    cache = caches[layer]
    h = cache.o[0] * np.tanh(value) if kind == "c" else value
    for upper in range(layer + 1, model.num_layers):
        up = caches[upper]
        h, _, _ = lstm_step(h[None, :], up.h_prev, up.c_prev, *model.params.layer(upper))
        h = h[0]
    return f(h)[0]


def check_signal_chain(model: RecurrentLM, seed: int = 0, tolerance: float = 1e-4,
                       eps: float = 1e-5) -> list[GradCheckReport]:
    """Per-layer recoding gradients against finite differences of the signal."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, model.vocab_size, size=(1, 3))
    gold = int(rng.integers(0, model.vocab_size))
    state = [(rng.uniform(-0.5, 0.5, (1, model.hidden_size)), rng.uniform(-0.5, 0.5, (1, model.hidden_size)))
             for _ in range(model.num_layers)]
    # a short warm-up so the step under test has a non-trivial carried state
    run = model.forward(ids[:, :2], state=state, signal_rng=rng, targets=rng.integers(0, model.vocab_size, (1, 2)))
    state = run.final_state
    x = model.params["embedding"][ids[:, 2]]
    caches = []
    for layer in range(model.num_layers):
        h, c, cache = lstm_step(x, *state[layer], *model.params.layer(layer))
        caches.append(cache)
        x = h
    f = signal_evaluator(model, gold=gold, rng=rng)
    _, top = f(caches[-1].h[0])
    grads = signal_gradients(top, caches, model.params)
    reports = []
    for layer in range(model.num_layers):
        for kind, analytic, point in (("h", grads.g_h[layer], caches[layer].h[0]),
                                      ("c", grads.g_c[layer], caches[layer].c[0])):
            numeric = finite_diff_grad(lambda v: _upward_delta(model, caches, layer, kind, v, f), point, eps)
            reports.append(compare(f"chain[{model.recoding.signal}] layer{layer}.{kind}", analytic[0], numeric,
                                   tolerance))
    return reports


def check_top_gradient(model: RecurrentLM, seed: int = 0, tolerance: float = 1e-4,
                       eps: float = 1e-5, samples: int = 5) -> GradCheckReport:
    """Closed-form top-layer signal gradient against finite differences at random points."""
    rng = np.random.default_rng(seed)
    worst = None
    for _ in range(samples):
        z = rng.uniform(-1.0, 1.0, model.hidden_size)
        gold = int(rng.integers(0, model.vocab_size))
        f = signal_evaluator(model, gold=gold, rng=rng)
        analytic = f(z)[1]
        numeric = finite_diff_grad(lambda v: f(v)[0], z, eps)
        report = compare(f"top_grad[{model.recoding.signal}]", analytic, numeric, tolerance)
        if worst is None or report.max_rel_err > worst.max_rel_err:
            worst = report
    return worst


def check_bptt(model: RecurrentLM, seed: int = 0, steps: int = 4, batch: int = 2, dropout: float = 0.0,
               tolerance: float = 1e-4, eps: float = 1e-5, name: str | None = None) -> GradCheckReport:
    """All parameter gradients of one chunk loss against central differences.

    Recoding gradients, predictor inputs and masks are replayed from the
    analytic pass, matching the contract that they are constants in the graph.
    """
    rng = np.random.default_rng(seed)
    v, n = model.vocab_size, model.hidden_size
    ids = rng.integers(0, v, (batch, steps))
    targets = rng.integers(0, v, (batch, steps))
    state = [(rng.uniform(-0.5, 0.5, (batch, n)), rng.uniform(-0.5, 0.5, (batch, n)))
             for _ in range(model.num_layers)]
    mask = make_dropout_mask(batch, n, dropout, rng)
    kwargs = dict(dropout_mask=mask, member_loss=True, n_tokens=7)
    base = model.forward(ids, targets, state, signal_rng=rng, **kwargs)
    grads = model.backward(base)

    def loss():
        return model.forward(ids, targets, state, replay=base, **kwargs).loss

    analytic, numeric = [], []
    for key, arr in model.params.arrays.items():
        flat = arr.reshape(-1)
        num = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss()
            flat[i] = old - eps
            down = loss()
            flat[i] = old
            num[i] = (up - down) / (2.0 * eps)
        analytic.append(grads[key].reshape(-1))
        numeric.append(num)
    label = name or f"bptt[{model.recoding.signal if model.recoding.enabled else 'none'}]"
    return compare(label, np.concatenate(analytic), np.concatenate(numeric), tolerance)


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-4) -> list[GradCheckReport]:
    """Everything the ``gradcheck`` command runs."""
    reports = []
    for signal, kwargs in (("surprisal", {}), ("mcd", dict(k=10, mc_dropout=0.42)), ("bae", dict(k=3))):
        model = toy_model(signal, seed=seed, **kwargs)
        reports.append(check_top_gradient(model, seed=seed, tolerance=tolerance))
        reports.extend(check_signal_chain(model, seed=seed, tolerance=tolerance))
    reports.append(check_bptt(toy_model(None, seed=seed), seed=seed, tolerance=tolerance))
    reports.append(check_bptt(toy_model(None, seed=seed), seed=seed, dropout=0.15, tolerance=tolerance,
                              name="bptt[none, decoder dropout]"))
    # step sizes large enough that the step-size path carries gradients above the FD noise floor
    for signal, step_kind, alpha in (("surprisal", "learned", 0.1), ("mcd", "learned", 0.1),
                                     ("bae", "fixed", 0.1), ("surprisal", "predicted", 2.0)):
        model = toy_model(signal, seed=seed, step_kind=step_kind, alpha=alpha)
        reports.append(check_bptt(model, seed=seed, tolerance=tolerance, name=f"bptt[{signal}, {step_kind} step]"))
    return reports


# -- error reduction through time ----------------------------------------------

def check_theorem2(model: RecurrentLM, ids, recode_step: int, horizon: int,
                   seed: int = 0) -> tuple[float, float]:
    """Signal at ``recode_step + horizon`` with recoding only at ``recode_step`` vs never.

    Returns ``(delta, delta_star)``: without recoding, and with the single
    recoding step. Both runs draw identical dropout masks.
    """
    ids = np.asarray(ids, dtype=np.int64).reshape(1, -1)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    target_step = recode_step + horizon
    if recode_step < 0 or horizon < 0 or target_step >= inputs.shape[1]:
        raise IndexError("recode_step + horizon lies outside the sequence")
    never = model.forward(inputs, targets, signal_rng=np.random.default_rng(seed), recode_steps=set(),
                          post_deltas=True)
    once = model.forward(inputs, targets, signal_rng=np.random.default_rng(seed), recode_steps={recode_step},
                         post_deltas=True)
    return float(never.steps[target_step].delta[0]), float(once.steps[target_step].delta_post[0])
