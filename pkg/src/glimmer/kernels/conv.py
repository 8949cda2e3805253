"""Convolution kernels: dense, depthwise, grouped dilated depthwise, grouped 1x1.

Every kernel has a ``naive`` reference path (explicit per-channel / per-tap
loops) and a ``fast`` path (whole-tensor tap accumulation, GEMM, batched
matmul). All convolutions are cross-correlations without bias; a separate
``bias_add`` exists for the optional per-channel conv bias.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from ..tensor import check_tensor
from ._parallel import map_batch

IMPLS = ("naive", "fast")


@dataclass(frozen=True)
class ConvSpec:
    kernel: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0:
            raise ValueError(f"invalid conv spec {self}")

    @classmethod
    def same(cls, kernel: int, dilation: int = 1) -> "ConvSpec":
        return cls(kernel, 1, dilation, dilation * (kernel - 1) // 2)

    @property
    def span(self) -> int:
        return self.dilation * (self.kernel - 1) + 1

    def out_size(self, n: int) -> int:
        padded = n + 2 * self.padding
        if padded < self.span:
            raise ShapeError(f"kernel span {self.span} larger than padded input {padded}")
        return (padded - self.span) // self.stride + 1


def _check_impl(impl: str) -> None:
    if impl not in IMPLS:
        raise ValueError(f"impl must be one of {IMPLS}, got {impl!r}")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _tap(xp, oy: int, ox: int, ho: int, wo: int, s: int):
    """View of the padded input seen by kernel tap at offset (oy, ox)."""
    return xp[..., oy:oy + s * (ho - 1) + 1:s, ox:ox + s * (wo - 1) + 1:s]


# ---------------------------------------------------------------- dense conv

def _conv2d_shapes(x, w, spec):
    check_tensor(x)
    if w.ndim != 4 or w.shape[2] != spec.kernel or w.shape[3] != spec.kernel:
        raise ShapeError(f"weight shape {w.shape} does not match kernel {spec.kernel}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    return spec.out_size(x.shape[2]), spec.out_size(x.shape[3])


def _conv2d_windows(xp, spec, ho, wo):
    d, s = spec.dilation, spec.stride
    win = sliding_window_view(xp, (spec.span, spec.span), axis=(2, 3))
    return win[:, :, ::s, ::s, ::d, ::d][:, :, :ho, :wo]


def _conv2d_fast(x, w, spec):
    ho, wo = spec.out_size(x.shape[2]), spec.out_size(x.shape[3])
    win = _conv2d_windows(_pad(x, spec.padding), spec, ho, wo)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec, impl: str = "fast") -> np.ndarray:
    """Dense cross-correlation; ``w`` has shape (Cout, Cin, k, k)."""
    _check_impl(impl)
    ho, wo = _conv2d_shapes(x, w, spec)
    if impl == "fast":
        return map_batch(_conv2d_fast, x, w, spec)
    k, d, s = spec.kernel, spec.dilation, spec.stride
    xp = _pad(x, spec.padding)
    out = np.zeros((x.shape[0], w.shape[0], ho, wo), dtype=np.result_type(x, w))
    for o in range(w.shape[0]):
        for i in range(w.shape[1]):
            for ky in range(k):
                for kx in range(k):
                    out[:, o] += w[o, i, ky, kx] * _tap(xp[:, i], ky * d, kx * d, ho, wo, s)
    return out


def conv2d_backward(dy, x, w, spec: ConvSpec, impl: str = "fast"):
    """Returns (dx, dw)."""
    _check_impl(impl)
    ho, wo = _conv2d_shapes(x, w, spec)
    if dy.shape != (x.shape[0], w.shape[0], ho, wo):
        raise ShapeError(f"conv2d upstream shape {dy.shape} != {(x.shape[0], w.shape[0], ho, wo)}")
    k, d, s, p = spec.kernel, spec.dilation, spec.stride, spec.padding
    xp = _pad(x, p)
    dxp = np.zeros_like(xp)
    if impl == "fast":
        win = _conv2d_windows(xp, spec, ho, wo)
        dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(dy, w, axes=([1], [0]))  # (n, ho, wo, cin, k, k)
        for ky in range(k):
            for kx in range(k):
                _tap(dxp, ky * d, kx * d, ho, wo, s)[...] += cols[..., ky, kx].transpose(0, 3, 1, 2)
    else:
        dw = np.zeros_like(w)
        for o in range(w.shape[0]):
            for i in range(w.shape[1]):
                for ky in range(k):
                    for kx in range(k):
                        view = _tap(xp[:, i], ky * d, kx * d, ho, wo, s)
                        dw[o, i, ky, kx] = np.sum(dy[:, o] * view)
                        _tap(dxp[:, i], ky * d, kx * d, ho, wo, s)[...] += w[o, i, ky, kx] * dy[:, o]
    dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
    return np.ascontiguousarray(dx), dw.astype(w.dtype, copy=False)


# ----------------------------------------------------------- depthwise conv

def _dw_shapes(x, w, spec):
    check_tensor(x)
    if w.shape != (x.shape[1], 1, spec.kernel, spec.kernel):
        raise ShapeError(f"depthwise weight {w.shape} != {(x.shape[1], 1, spec.kernel, spec.kernel)}")
    return spec.out_size(x.shape[2]), spec.out_size(x.shape[3])


def _dw_fast(x, w, spec):
    ho, wo = spec.out_size(x.shape[2]), spec.out_size(x.shape[3])
    k, d, s = spec.kernel, spec.dilation, spec.stride
    xp = _pad(x, spec.padding)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x, w))
    for ky in range(k):
        for kx in range(k):
            out += _tap(xp, ky * d, kx * d, ho, wo, s) * w[None, :, 0, ky, kx, None, None]
    return out


def _dw_naive(x, w, spec):
    ho, wo = spec.out_size(x.shape[2]), spec.out_size(x.shape[3])
    k, d, s = spec.kernel, spec.dilation, spec.stride
    xp = _pad(x, spec.padding)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x, w))
    for c in range(x.shape[1]):
        for ky in range(k):
            for kx in range(k):
                out[:, c] += _tap(xp[:, c], ky * d, kx * d, ho, wo, s) * w[c, 0, ky, kx]
    return out


def _dw_backward(dy, x, w, spec, impl):
    ho, wo = dy.shape[2], dy.shape[3]
    k, d, s, p = spec.kernel, spec.dilation, spec.stride, spec.padding
    xp = _pad(x, p)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    if impl == "fast":
        for ky in range(k):
            for kx in range(k):
                dw[:, 0, ky, kx] = np.sum(dy * _tap(xp, ky * d, kx * d, ho, wo, s), axis=(0, 2, 3))
                _tap(dxp, ky * d, kx * d, ho, wo, s)[...] += dy * w[None, :, 0, ky, kx, None, None]
    else:
        for c in range(x.shape[1]):
            for ky in range(k):
                for kx in range(k):
                    dw[c, 0, ky, kx] = np.sum(dy[:, c] * _tap(xp[:, c], ky * d, kx * d, ho, wo, s))
                    _tap(dxp[:, c], ky * d, kx * d, ho, wo, s)[...] += dy[:, c] * w[c, 0, ky, kx]
    dx = dxp[:, :, p:p + x.shape[2], p:p + x.shape[3]] if p else dxp
    return np.ascontiguousarray(dx), dw


def dwconv2d(x: np.ndarray, w: np.ndarray, spec: ConvSpec, impl: str = "fast") -> np.ndarray:
    """Depthwise conv, one (1, k, k) filter per channel."""
    _check_impl(impl)
    _dw_shapes(x, w, spec)
    if impl == "fast":
        return map_batch(_dw_fast, x, w, spec)
    return _dw_naive(x, w, spec)


def dwconv2d_backward(dy, x, w, spec: ConvSpec, impl: str = "fast"):
    """Returns (dx, dw)."""
    _check_impl(impl)
    ho, wo = _dw_shapes(x, w, spec)
    if dy.shape != (x.shape[0], x.shape[1], ho, wo):
        raise ShapeError(f"dwconv2d upstream shape {dy.shape} != {(x.shape[0], x.shape[1], ho, wo)}")
    return _dw_backward(dy, x, w, spec, impl)


# ------------------------------------------- grouped dilated depthwise conv

def _check_groups(x, w, dilations):
    check_tensor(x)
    dilations = [int(d) for d in dilations]
    m, ch = len(dilations), x.shape[1]
    if m < 1 or ch % m:
        raise ShapeError(f"{ch} channels not divisible into {m} groups")
    if any(d < 1 for d in dilations):
        raise ValueError(f"dilations must be >= 1, got {dilations}")
    k = w.shape[-1]
    if w.shape != (ch, 1, k, k) or k % 2 == 0:
        raise ShapeError(f"grouped dilated weight {w.shape} must be ({ch}, 1, k, k) with odd k")
    return dilations, ch // m, k


def dilation_runs(dilations: Sequence[int], group_size: int):
    """Merge adjacent groups sharing a dilation: [(c_start, c_stop, d), ...]."""
    runs = []
    for i, d in enumerate(dilations):
        lo, hi = i * group_size, (i + 1) * group_size
        if runs and runs[-1][2] == d:
            runs[-1] = (runs[-1][0], hi, d)
        else:
            runs.append((lo, hi, d))
    return runs


def _gdd_fast(x, w, dilations, cg, k):
    out = np.empty(x.shape, dtype=np.result_type(x, w))
    for lo, hi, d in dilation_runs(dilations, cg):
        out[:, lo:hi] = _dw_fast(x[:, lo:hi], w[lo:hi], ConvSpec.same(k, d))
    return out


def grouped_dilated_dwconv(x: np.ndarray, w: np.ndarray, dilations: Sequence[int],
                           impl: str = "fast") -> np.ndarray:
    """Depthwise conv where contiguous channel group ``i`` uses ``dilations[i]``.

    Stride 1 with per-group "same" padding, so every group keeps the input's
    spatial size. The weight count is C*k*k whatever the dilation schedule.
    """
    _check_impl(impl)
    dilations, cg, k = _check_groups(x, w, dilations)
    if impl == "fast":
        return map_batch(_gdd_fast, x, w, dilations, cg, k)
    n, ch, h, wd = x.shape
    out = np.zeros((n, ch, h, wd), dtype=np.result_type(x, w))
    for c in range(ch):
        d = dilations[c // cg]
        p = d * (k - 1) // 2
        xc = np.pad(x[:, c], ((0, 0), (p, p), (p, p)))
        for ky in range(k):
            for kx in range(k):
                out[:, c] += xc[:, ky * d:ky * d + h, kx * d:kx * d + wd] * w[c, 0, ky, kx]
    return out


def grouped_dilated_dwconv_backward(dy, x, w, dilations, impl: str = "fast"):
    """Returns (dx, dw)."""
    _check_impl(impl)
    dilations, cg, k = _check_groups(x, w, dilations)
    if dy.shape != x.shape:
        raise ShapeError(f"grouped dilated upstream shape {dy.shape} != {x.shape}")
    dx = np.empty_like(x)
    dw = np.empty_like(w)
    if impl == "fast":
        runs = dilation_runs(dilations, cg)
    else:
        runs = [(i * cg, (i + 1) * cg, d) for i, d in enumerate(dilations)]
    for lo, hi, d in runs:
        dx[:, lo:hi], dw[lo:hi] = _dw_backward(dy[:, lo:hi], x[:, lo:hi], w[lo:hi],
                                               ConvSpec.same(k, d), impl)
    return dx, dw


# ------------------------------------------------------ grouped pointwise

def _pw_shapes(x, w, groups):
    check_tensor(x)
    cin, cout = x.shape[1], w.shape[0]
    if groups < 1 or cin % groups or cout % groups:
        raise ShapeError(f"channels in={cin}, out={cout} not divisible by groups={groups}")
    if w.shape != (cout, cin // groups, 1, 1):
        raise ShapeError(f"grouped pointwise weight {w.shape} != {(cout, cin // groups, 1, 1)}")
    return cin // groups, cout // groups


def grouped_pointwise_conv(x: np.ndarray, w: np.ndarray, groups: int, impl: str = "fast") -> np.ndarray:
    """1x1 conv where output group g only sees input group g.

    ``w`` has shape (Cout, Cin/groups, 1, 1), PyTorch's grouped layout.
    """
    _check_impl(impl)
    ci, co = _pw_shapes(x, w, groups)
    n, _, h, wd = x.shape
    if impl == "fast":
        xg = x.reshape(n, groups, ci, h * wd)
        wg = w.reshape(groups, co, ci)
        return np.matmul(wg[None], xg).reshape(n, groups * co, h, wd)
    out = np.zeros((n, w.shape[0], h, wd), dtype=np.result_type(x, w))
    for g in range(groups):
        for o in range(co):
            for i in range(ci):
                out[:, g * co + o] += w[g * co + o, i, 0, 0] * x[:, g * ci + i]
    return out


def grouped_pointwise_conv_backward(dy, x, w, groups: int, impl: str = "fast"):
    """Returns (dx, dw)."""
    _check_impl(impl)
    ci, co = _pw_shapes(x, w, groups)
    n, _, h, wd = x.shape
    if dy.shape != (n, w.shape[0], h, wd):
        raise ShapeError(f"grouped pointwise upstream shape {dy.shape} != {(n, w.shape[0], h, wd)}")
    if impl == "fast":
        xg = x.reshape(n, groups, ci, h * wd)
        dyg = dy.reshape(n, groups, co, h * wd)
        wg = w.reshape(groups, co, ci)
        dx = np.matmul(wg.transpose(0, 2, 1)[None], dyg).reshape(x.shape)
        dw = np.einsum("ngop,ngip->goi", dyg, xg).reshape(w.shape)
        return dx, dw.astype(w.dtype, copy=False)
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for g in range(groups):
        for o in range(co):
            for i in range(ci):
                dw[g * co + o, i, 0, 0] = np.sum(dy[:, g * co + o] * x[:, g * ci + i])
                dx[:, g * ci + i] += w[g * co + o, i, 0, 0] * dy[:, g * co + o]
    return dx, dw


# ----------------------------------------------------------------- bias

def bias_add(x: np.ndarray, b: np.ndarray) -> np.ndarray:
    if b.shape != (x.shape[1],):
        raise ShapeError(f"bias of shape {b.shape} for {x.shape[1]} channels")
    return x + b[None, :, None, None]


def bias_add_backward(dy, x, b):
    return dy, dy.sum(axis=(0, 2, 3)).astype(b.dtype, copy=False)
