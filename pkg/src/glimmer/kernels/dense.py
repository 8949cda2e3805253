"""Activation, fully connected layer and the classification loss."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeError


def relu6(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 6.0)


def relu6_backward(dy, x) -> np.ndarray:
    # zero gradient at the kinks 0 and 6, like hardtanh
    return dy * ((x > 0) & (x < 6))


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (n, F), w: (K, F), b: (K,) -> x @ w.T + b."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} incompatible")
    return x @ w.T + b


def linear_backward(dy, x, w, b):
    """Returns (dx, dw, db)."""
    if dy.shape != (x.shape[0], w.shape[0]):
        raise ShapeError(f"linear upstream shape {dy.shape} != {(x.shape[0], w.shape[0])}")
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return labels


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and the softmax probabilities."""
    labels = _check_labels(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -float(np.mean(logp[np.arange(labels.size), labels]))
    return loss, np.exp(logp)


def softmax_cross_entropy_backward(dloss, logits, labels) -> np.ndarray:
    labels = _check_labels(logits, labels)
    probs = softmax(logits)
    probs[np.arange(labels.size), labels] -= 1.0
    return probs * (dloss / labels.size)
