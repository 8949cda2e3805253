"""Batch normalization and Global Response Normalization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
GRN_EPS = 1e-6


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.ones(channels, dtype), np.zeros(channels, dtype),
                   np.zeros(channels, dtype), np.ones(channels, dtype))


@dataclass
class GrnState:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = field(default=GRN_EPS)

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "GrnState":
        return cls(np.zeros(channels, dtype), np.zeros(channels, dtype))


def _bcast(v):
    return v[None, :, None, None]


def _check_channels(x, st, op):
    if x.ndim != 4 or st.gamma.shape != (x.shape[1],) or st.beta.shape != (x.shape[1],):
        raise ShapeError(f"{op}: state has {st.gamma.shape[0]} channels, input {x.shape}")


def batchnorm(x: np.ndarray, st: BatchNormState, mode: str = "train") -> np.ndarray:
    """Per-channel normalization over (n, h, w).

    In train mode the running statistics in ``st`` are updated in place
    (unbiased variance, PyTorch convention).
    """
    _check_channels(x, st, "batchnorm")
    if mode == "infer":
        inv = 1.0 / np.sqrt(st.running_var + st.eps)
        return (x - _bcast(st.running_mean)) * _bcast(inv * st.gamma) + _bcast(st.beta)
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    xhat = (x - _bcast(mean)) / _bcast(np.sqrt(var + st.eps))
    unbiased = var * count / (count - 1) if count > 1 else var
    mom = st.momentum
    st.running_mean[...] = (1 - mom) * st.running_mean + mom * mean
    st.running_var[...] = (1 - mom) * st.running_var + mom * unbiased
    return xhat * _bcast(st.gamma) + _bcast(st.beta)


def batchnorm_backward(dy, x, st: BatchNormState, mode: str = "train"):
    """Returns (dx, dgamma, dbeta). Train mode differentiates through batch stats."""
    _check_channels(x, st, "batchnorm")
    if dy.shape != x.shape:
        raise ShapeError(f"batchnorm upstream shape {dy.shape} != {x.shape}")
    axes = (0, 2, 3)
    if mode == "infer":
        inv = 1.0 / np.sqrt(st.running_var + st.eps)
        xhat = (x - _bcast(st.running_mean)) * _bcast(inv)
        return dy * _bcast(st.gamma * inv), np.sum(dy * xhat, axis=axes), dy.sum(axis=axes)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.mean(axis=axes)
    inv = 1.0 / np.sqrt(x.var(axis=axes) + st.eps)
    xhat = (x - _bcast(mean)) * _bcast(inv)
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * _bcast(st.gamma)
    dx = _bcast(inv / count) * (count * dxhat - _bcast(dxhat.sum(axis=axes))
                                - xhat * _bcast(np.sum(dxhat * xhat, axis=axes)))
    return dx, dgamma, dbeta


def grn(x: np.ndarray, st: GrnState) -> np.ndarray:
    """Global Response Normalization, residual form.

    Per sample: G_c = ||x_c||_2 over (h, w), N_c = G_c / (mean_c G + eps),
    y = gamma_c * x * N_c + beta_c + x.
    """
    _check_channels(x, st, "grn")
    g = np.sqrt(np.sum(x * x, axis=(2, 3), keepdims=True))
    nrm = g / (g.mean(axis=1, keepdims=True) + st.eps)
    return _bcast(st.gamma) * (x * nrm) + _bcast(st.beta) + x


def grn_backward(dy, x, st: GrnState):
    """Returns (dx, dgamma, dbeta)."""
    _check_channels(x, st, "grn")
    if dy.shape != x.shape:
        raise ShapeError(f"grn upstream shape {dy.shape} != {x.shape}")
    ch = x.shape[1]
    g = np.sqrt(np.sum(x * x, axis=(2, 3), keepdims=True))
    denom = g.mean(axis=1, keepdims=True) + st.eps
    nrm = g / denom
    gamma = _bcast(st.gamma)
    dgamma = np.sum(dy * x * nrm, axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dnrm = np.sum(dy * gamma * x, axis=(2, 3), keepdims=True)
    dg = dnrm / denom - np.sum(dnrm * g, axis=1, keepdims=True) / (denom**2 * ch)
    safe = np.where(g > 0, g, 1.0)
    dx = dy + dy * gamma * nrm + np.where(g > 0, dg / safe, 0.0) * x
    return dx, dgamma, dbeta
