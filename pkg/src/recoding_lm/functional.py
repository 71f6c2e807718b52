"""Elementwise activations and the softmax used throughout the model."""

import numpy as np

# floor applied to probabilities before every log
PROB_EPS = 1e-12


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(x):
    return np.tanh(x)


def relu(x):
    return np.maximum(x, 0.0)


def softplus(x):
    """log(1 + exp(x)) without overflow."""
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=axis, keepdims=True)


def safe_log(p):
    return np.log(np.maximum(p, PROB_EPS))


def entropy(p, axis=-1):
    """Shannon entropy in nats with 0 log 0 taken as 0."""
    return -np.sum(p * safe_log(p), axis=axis)
