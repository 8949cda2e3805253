"""Window pooling and global average pooling."""
from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from ..tensor import check_tensor
from .conv import _check_impl, _tap


def pool_out_size(n: int, k: int, s: int, ceil_mode: bool = False) -> int:
    """Output length of an unpadded pooling window sweep.

    ``ceil_mode`` keeps a trailing partial window (as long as it starts inside
    the input); floor mode drops it.
    """
    if ceil_mode:
        out = math.ceil(max(n - k, 0) / s) + 1
        if (out - 1) * s >= n:
            out -= 1
        return out
    if n < k:
        raise ShapeError(f"pool window {k} exceeds input extent {n}")
    return (n - k) // s + 1


def _geometry(x, k, s, ceil_mode):
    check_tensor(x)
    if k < 1 or s < 1:
        raise ValueError(f"pool kernel and stride must be >= 1, got k={k}, s={s}")
    ho = pool_out_size(x.shape[2], k, s, ceil_mode)
    wo = pool_out_size(x.shape[3], k, s, ceil_mode)
    # pad bottom/right so every (possibly partial) window is addressable
    ph = max((ho - 1) * s + k - x.shape[2], 0)
    pw = max((wo - 1) * s + k - x.shape[3], 0)
    return ho, wo, ph, pw


def _valid_counts(h, w, ho, wo, k, s, dtype):
    rows = np.minimum(np.arange(ho) * s + k, h) - np.arange(ho) * s
    cols = np.minimum(np.arange(wo) * s + k, w) - np.arange(wo) * s
    return np.outer(rows, cols).astype(dtype)


def pool2d(x: np.ndarray, kind: str, k: int, s: int, ceil_mode: bool = False,
           impl: str = "fast") -> np.ndarray:
    """Max or average pooling without padding. Partial windows (ceil mode)
    take the max / mean over their in-bounds elements only."""
    _check_impl(impl)
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    ho, wo, ph, pw = _geometry(x, k, s, ceil_mode)
    n, c, h, w = x.shape
    if impl == "naive":
        out = np.empty((n, c, ho, wo), dtype=x.dtype)
        for oy in range(ho):
            for ox in range(wo):
                win = x[:, :, oy * s:oy * s + k, ox * s:ox * s + k]
                out[:, :, oy, ox] = win.max(axis=(2, 3)) if kind == "max" else win.mean(axis=(2, 3))
        return out
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=fill) if ph or pw else x
    if kind == "max":
        out = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
        for ky in range(k):
            for kx in range(k):
                np.maximum(out, _tap(xp, ky, kx, ho, wo, s), out=out)
        return out
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            out += _tap(xp, ky, kx, ho, wo, s)
    return out / _valid_counts(h, w, ho, wo, k, s, x.dtype)


def pool2d_backward(dy, x, kind: str, k: int, s: int, ceil_mode: bool = False,
                    impl: str = "fast") -> np.ndarray:
    """Max pooling routes each gradient to the first maximal element of its
    window (row-major); average pooling spreads it over in-bounds elements."""
    _check_impl(impl)
    ho, wo, ph, pw = _geometry(x, k, s, ceil_mode)
    n, c, h, w = x.shape
    if dy.shape != (n, c, ho, wo):
        raise ShapeError(f"pool upstream shape {dy.shape} != {(n, c, ho, wo)}")
    if impl == "naive":
        dx = np.zeros_like(x)
        for oy in range(ho):
            for ox in range(wo):
                ys, xs = oy * s, ox * s
                win = x[:, :, ys:ys + k, xs:xs + k]
                wh, ww = win.shape[2], win.shape[3]
                if kind == "max":
                    idx = win.reshape(n, c, -1).argmax(axis=2)
                    ni, ci = np.indices((n, c))
                    np.add.at(dx, (ni, ci, ys + idx // ww, xs + idx % ww), dy[:, :, oy, ox])
                else:
                    dx[:, :, ys:ys + wh, xs:xs + ww] += (dy[:, :, oy, ox] / (wh * ww))[:, :, None, None]
        return dx
    dxp = np.zeros((n, c, h + ph, w + pw), dtype=x.dtype)
    if kind == "max":
        xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=-np.inf) if ph or pw else x
        best = np.full((n, c, ho, wo), -np.inf, dtype=x.dtype)
        arg = np.zeros((n, c, ho, wo), dtype=np.int64)
        for t in range(k * k):
            view = _tap(xp, t // k, t % k, ho, wo, s)
            better = view > best
            best = np.where(better, view, best)
            arg[better] = t
        for t in range(k * k):
            _tap(dxp, t // k, t % k, ho, wo, s)[...] += np.where(arg == t, dy, 0.0)
    else:
        share = dy / _valid_counts(h, w, ho, wo, k, s, x.dtype)
        for ky in range(k):
            for kx in range(k):
                _tap(dxp, ky, kx, ho, wo, s)[...] += share
    return np.ascontiguousarray(dxp[:, :, :h, :w])


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    check_tensor(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(dy, x) -> np.ndarray:
    if dy.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"global pool upstream shape {dy.shape} for input {x.shape}")
    return np.broadcast_to(dy / (x.shape[2] * x.shape[3]), x.shape).astype(x.dtype)
