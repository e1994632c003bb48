"""Scalar training losses."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, _stable_sigmoid, as_tensor, log_softmax

__all__ = ["cross_entropy", "soft_cross_entropy", "mse", "binary_cross_entropy", "binary_cross_entropy_with_logits"]


def cross_entropy(logits, target) -> Tensor:
    """Mean softmax cross-entropy of ``logits[..., n]`` against integer class indices."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    n = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.size and (target.min() < 0 or target.max() >= n):
        raise IndexError(f"cross_entropy target out of range [0, {n}): {target}")
    logp = log_softmax(logits, axis=-1).reshape(-1, n)
    picked = logp[np.arange(target.size), target.reshape(-1)]
    return -picked.mean()


def soft_cross_entropy(logits, target) -> Tensor:
    """Mean cross-entropy against target distributions of the same shape as ``logits``."""
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != logits.shape:
        raise ValueError(f"target shape {target.shape} does not match logits {logits.shape}")
    rows = max(1, target.size // max(1, logits.shape[-1]))
    return -(log_softmax(logits, axis=-1) * target).sum() / rows


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()


def binary_cross_entropy(prob, target) -> Tensor:
    """BCE on probabilities already squashed into (0, 1)."""
    prob, target = as_tensor(prob), as_tensor(target)
    if prob.shape != target.shape:
        raise ValueError(f"bce shapes differ: {prob.shape} vs {target.shape}")
    if np.any(prob.data <= 0.0) or np.any(prob.data >= 1.0):
        raise ValueError("bce probabilities must lie strictly inside (0, 1)")
    return -(target * prob.log() + (1.0 - target) * (1.0 - prob).log()).mean()


def binary_cross_entropy_with_logits(logits, target) -> Tensor:
    """Numerically stable sigmoid + BCE, averaged over all entries."""
    logits = as_tensor(logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if logits.shape != t.shape:
        raise ValueError(f"bce shapes differ: {logits.shape} vs {t.shape}")
    x = logits.data
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    count = x.size

    def backward(g):
        return ((_stable_sigmoid(x) - t) * (g / count),)

    return _make(np.array(per.mean()), (logits,), backward, "bce_logits")
