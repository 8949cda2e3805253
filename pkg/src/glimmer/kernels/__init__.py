"""Forward and reverse-mode kernels.

Forward functions take and return NCHW ndarrays. Each has a matching
``*_backward`` taking the upstream gradient followed by the forward inputs;
:func:`vjp` dispatches to them by op name with the forward arguments passed as
a dict, returning gradients keyed by input name.
"""
from __future__ import annotations

import numpy as np

from .. import tensor as T
from ..errors import ShapeError
from ._parallel import get_num_threads, set_num_threads
from .conv import (
    IMPLS,
    ConvSpec,
    bias_add,
    bias_add_backward,
    conv2d,
    conv2d_backward,
    dwconv2d,
    dwconv2d_backward,
    grouped_dilated_dwconv,
    grouped_dilated_dwconv_backward,
    grouped_pointwise_conv,
    grouped_pointwise_conv_backward,
)
from .dense import (
    linear,
    linear_backward,
    relu6,
    relu6_backward,
    softmax,
    softmax_cross_entropy,
    softmax_cross_entropy_backward,
)
from .norm import BatchNormState, GrnState, batchnorm, batchnorm_backward, grn, grn_backward
from .pool import global_avg_pool, global_avg_pool_backward, pool2d, pool2d_backward, pool_out_size


def _concat_vjp(dy, a, b):
    return dy[:, :a.shape[1]].copy(), dy[:, a.shape[1]:].copy()


def _permute_vjp(dy, x, p):
    return (T.channel_permute(dy, p.inverse()),)


def _add_vjp(dy, a, b):
    return dy, dy


# op -> (backward, names of forward args it needs in order, names of returned grads)
_VJP = {
    "conv2d": (conv2d_backward, ("x", "w", "spec"), ("x", "w")),
    "dwconv2d": (dwconv2d_backward, ("x", "w", "spec"), ("x", "w")),
    "grouped_dilated_dwconv": (grouped_dilated_dwconv_backward, ("x", "w", "dilations"), ("x", "w")),
    "grouped_pointwise_conv": (grouped_pointwise_conv_backward, ("x", "w", "groups"), ("x", "w")),
    "bias_add": (bias_add_backward, ("x", "b"), ("x", "b")),
    "batchnorm": (batchnorm_backward, ("x", "st", "mode"), ("x", "gamma", "beta")),
    "relu6": (relu6_backward, ("x",), ("x",)),
    "pool2d": (pool2d_backward, ("x", "kind", "k", "s", "ceil_mode"), ("x",)),
    "global_avg_pool": (global_avg_pool_backward, ("x",), ("x",)),
    "grn": (grn_backward, ("x", "st"), ("x", "gamma", "beta")),
    "linear": (linear_backward, ("x", "w", "b"), ("x", "w", "b")),
    "softmax_cross_entropy": (softmax_cross_entropy_backward, ("logits", "labels"), ("logits",)),
    "add": (_add_vjp, ("a", "b"), ("a", "b")),
    "channel_concat": (_concat_vjp, ("a", "b"), ("a", "b")),
    "channel_permute": (_permute_vjp, ("x", "p"), ("x",)),
}

OPS = tuple(_VJP)


def vjp(op_id: str, saved: dict, upstream) -> dict:
    """Reverse-mode gradient of ``op_id`` at the saved forward arguments."""
    try:
        fn, arg_names, out_names = _VJP[op_id]
    except KeyError:
        raise KeyError(f"unknown op {op_id!r}; known: {', '.join(OPS)}") from None
    missing = [a for a in arg_names if a not in saved and a not in ("mode", "ceil_mode")]
    if missing:
        raise KeyError(f"{op_id}: saved inputs lack {missing}")
    args = [saved.get(a, {"mode": "train", "ceil_mode": False}.get(a)) for a in arg_names]
    if isinstance(upstream, np.ndarray) and op_id in ("add", "relu6", "grn", "batchnorm", "bias_add"):
        ref = saved.get("x", saved.get("a"))
        if upstream.shape != ref.shape:
            raise ShapeError(f"{op_id}: upstream {upstream.shape} != forward output {ref.shape}")
    grads = fn(upstream, *args)
    if isinstance(grads, np.ndarray):
        grads = (grads,)
    return dict(zip(out_names, grads))


__all__ = [
    "IMPLS", "OPS", "ConvSpec", "BatchNormState", "GrnState", "vjp",
    "set_num_threads", "get_num_threads",
    "conv2d", "conv2d_backward", "dwconv2d", "dwconv2d_backward",
    "grouped_dilated_dwconv", "grouped_dilated_dwconv_backward",
    "grouped_pointwise_conv", "grouped_pointwise_conv_backward",
    "bias_add", "bias_add_backward",
    "batchnorm", "batchnorm_backward", "grn", "grn_backward",
    "relu6", "relu6_backward", "pool2d", "pool2d_backward", "pool_out_size",
    "global_avg_pool", "global_avg_pool_backward",
    "linear", "linear_backward", "softmax", "softmax_cross_entropy",
    "softmax_cross_entropy_backward",
]
