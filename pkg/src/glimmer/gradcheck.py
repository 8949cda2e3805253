"""Float64 finite-difference suites over kernels, blocks and a reduced model.

Every check projects the output onto a fixed random tensor R so the scalar
objective is sum(out * R); the analytic side feeds R as the upstream
gradient. Inputs to ReLU6 are nudged away from its kinks.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels as K
from .blocks import (
    Aggregator,
    Downsampler,
    GDBlock,
    Head,
    Refiner,
    Stage,
    StageSpec,
    Stem,
    feature_maps_recomb,
    mixed_concatenation,
    mixed_concatenation_backward,
    recomb_permutation,
)
from .kernels.norm import BatchNormState, GrnState
from .model import GlimmerNet, GlimmerNetConfig
from .prng import SplitMix64
from .tensor import channel_concat, channel_permute
from .train import GradCheckResult, grad_check

SCOPES = ("kernels", "blocks", "model")
TOL = 1e-4
# roundoff floor of a float64 central difference through BN-normalized
# blocks, relative to the largest analytic gradient of the check
ATOL = 1e-8


def _atol(params) -> float:
    return ATOL * max(1.0, max(float(np.max(np.abs(g))) for _, _, g in params if g.size))


@dataclass
class CheckRecord:
    scope: str
    name: str
    result: GradCheckResult

    @property
    def passed(self) -> bool:
        return self.result.passed(TOL)

    def to_dict(self) -> dict:
        return {"scope": self.scope, "check": self.name, "max_rel_err": self.result.max_rel_err,
                "worst": list(self.result.worst) if self.result.worst else None,
                "within_atol": self.result.within_atol, "retried": self.result.retried,
                "nonfinite": [list(c) for c in self.result.nonfinite], "pass": self.passed}


class _Rand:
    def __init__(self, seed):
        self.rng = SplitMix64(seed)

    def __call__(self, *shape, lo=-1.0, hi=1.0):
        n = int(np.prod(shape))
        return (lo + (hi - lo) * self.rng.uniform(n)).reshape(shape)

    def off_kinks(self, *shape):
        x = self(*shape, lo=-2.0, hi=8.0)
        for kink in (0.0, 6.0):
            near = np.abs(x - kink) < 1e-2
            x[near] += 2e-2
        return x


def _project_check(forward: Callable[[], np.ndarray], backward: Callable[[np.ndarray], dict],
                   inputs: dict, rnd: _Rand) -> GradCheckResult:
    """``backward(R)`` returns analytic grads keyed like ``inputs``."""
    r = rnd(*forward().shape)
    grads = backward(r)
    params = [(k, v, np.asarray(grads[k], dtype=np.float64)) for k, v in inputs.items()]
    return grad_check(lambda: float(np.sum(forward() * r)), params)


def _kernel_cases(rnd: _Rand):
    # name -> (forward closure, vjp op id, saved dict, differentiable input names)
    x, w = rnd(2, 3, 7, 7), rnd(4, 3, 3, 3)
    yield "conv2d", "conv2d", {"x": x, "w": w, "spec": K.ConvSpec(3, 2, 1, 1)}, ("x", "w"), \
        lambda s: K.conv2d(s["x"], s["w"], s["spec"])
    yield "conv2d_dilated", "conv2d", {"x": rnd(2, 2, 8, 8), "w": rnd(3, 2, 3, 3),
                                       "spec": K.ConvSpec(3, 1, 2, 2)}, ("x", "w"), \
        lambda s: K.conv2d(s["x"], s["w"], s["spec"])
    yield "dwconv2d_stride2", "dwconv2d", {"x": rnd(2, 4, 7, 7), "w": rnd(4, 1, 3, 3),
                                           "spec": K.ConvSpec(3, 2, 1, 1)}, ("x", "w"), \
        lambda s: K.dwconv2d(s["x"], s["w"], s["spec"])
    yield "dwconv2d_dilated", "dwconv2d", {"x": rnd(2, 4, 8, 8), "w": rnd(4, 1, 3, 3),
                                           "spec": K.ConvSpec(3, 1, 3, 3)}, ("x", "w"), \
        lambda s: K.dwconv2d(s["x"], s["w"], s["spec"])
    yield "grouped_dilated_dwconv", "grouped_dilated_dwconv", \
        {"x": rnd(2, 8, 7, 7), "w": rnd(8, 1, 3, 3), "dilations": [1, 2, 2, 3]}, ("x", "w"), \
        lambda s: K.grouped_dilated_dwconv(s["x"], s["w"], s["dilations"])
    yield "grouped_pointwise_conv", "grouped_pointwise_conv", \
        {"x": rnd(2, 8, 5, 5), "w": rnd(6, 4, 1, 1), "groups": 2}, ("x", "w"), \
        lambda s: K.grouped_pointwise_conv(s["x"], s["w"], s["groups"])
    yield "bias_add", "bias_add", {"x": rnd(2, 3, 4, 4), "b": rnd(3)}, ("x", "b"), \
        lambda s: K.bias_add(s["x"], s["b"])
    for mode in ("train", "infer"):
        st = BatchNormState(rnd(5) + 1.5, rnd(5), rnd(5), rnd(5, lo=0.5, hi=2.0))
        yield f"batchnorm_{mode}", "batchnorm", \
            {"x": rnd(3, 5, 4, 4), "st": st, "mode": mode, "gamma": st.gamma, "beta": st.beta}, \
            ("x", "gamma", "beta"), lambda s: K.batchnorm(s["x"], s["st"], s["mode"])
    yield "relu6", "relu6", {"x": rnd.off_kinks(2, 3, 5, 5)}, ("x",), lambda s: K.relu6(s["x"])
    for kind in ("max", "avg"):
        for ceil in (False, True):
            yield f"pool2d_{kind}_{'ceil' if ceil else 'floor'}", "pool2d", \
                {"x": rnd(2, 3, 7, 7), "kind": kind, "k": 2, "s": 2, "ceil_mode": ceil}, ("x",), \
                lambda s: K.pool2d(s["x"], s["kind"], s["k"], s["s"], s["ceil_mode"])
    yield "global_avg_pool", "global_avg_pool", {"x": rnd(2, 3, 4, 5)}, ("x",), \
        lambda s: K.global_avg_pool(s["x"])
    gst = GrnState(rnd(6), rnd(6))
    yield "grn", "grn", {"x": rnd(2, 6, 4, 4), "st": gst, "gamma": gst.gamma, "beta": gst.beta}, \
        ("x", "gamma", "beta"), lambda s: K.grn(s["x"], s["st"])
    yield "linear", "linear", {"x": rnd(3, 5), "w": rnd(4, 5), "b": rnd(4)}, ("x", "w", "b"), \
        lambda s: K.linear(s["x"], s["w"], s["b"])
    yield "add", "add", {"a": rnd(2, 3, 4, 4), "b": rnd(2, 3, 4, 4)}, ("a", "b"), \
        lambda s: s["a"] + s["b"]
    yield "channel_concat", "channel_concat", {"a": rnd(2, 3, 4, 4), "b": rnd(2, 2, 4, 4)}, ("a", "b"), \
        lambda s: channel_concat(s["a"], s["b"])
    yield "channel_permute", "channel_permute", {"x": rnd(2, 8, 3, 3), "p": recomb_permutation(8, 4)}, \
        ("x",), lambda s: channel_permute(s["x"], s["p"])


def check_kernels(seed: int = 0) -> list[CheckRecord]:
    rnd = _Rand(seed)
    out = []
    for name, op, saved, diff_names, fwd in _kernel_cases(rnd):
        inputs = {k: saved[k] for k in diff_names}
        res = _project_check(lambda: fwd(saved), lambda r: K.vjp(op, saved, r), inputs, rnd)
        out.append(CheckRecord("kernels", name, res))
    # the loss is already scalar: check it directly
    logits, labels = rnd(4, 5), np.array([0, 3, 1, 4])
    g = K.softmax_cross_entropy_backward(1.0, logits, labels)
    res = grad_check(lambda: K.softmax_cross_entropy(logits, labels)[0], [("logits", logits, g)])
    out.append(CheckRecord("kernels", "softmax_cross_entropy", res))
    return out


# ------------------------------------------------------------------ blocks

def _layer_params(layer, prefix=""):
    return [(prefix + name, lyr.params[key], lyr.grads[key]) for name, lyr, key in layer.named_params()]


def _zero(layer):
    for _, lyr, key in layer.named_params():
        lyr.grads[key][...] = 0


def _randomize(layer, rnd: _Rand):
    # GRN starts with gamma = 0, which would hide its normalization path
    for name, lyr, key in layer.named_params():
        if name.endswith("grn.gamma") or name.endswith("grn.beta"):
            lyr.params[key][...] = rnd(*lyr.params[key].shape)


def _layer_check(layer, x: np.ndarray, rnd: _Rand) -> GradCheckResult:
    _randomize(layer, rnd)
    r = rnd(*layer.forward(x, True).shape)
    _zero(layer)
    layer.forward(x, True)
    dx = layer.backward(r)
    params = [("input", x, dx)] + _layer_params(layer)
    return grad_check(lambda: float(np.sum(layer.forward(x, True) * r)), params, atol=_atol(params), retry_above=TOL)


class _AggWrap:
    """Adapts the two-input aggregator to the single-input check."""

    def __init__(self, agg, width):
        self.agg, self.width = agg, width

    def named_params(self):
        return self.agg.named_params()

    def forward(self, x, train=True):
        return self.agg.forward(x[:, :self.width], x[:, self.width:], train)

    def backward(self, dy):
        return np.concatenate(self.agg.backward(dy), axis=1)


def check_blocks(seed: int = 0) -> list[CheckRecord]:
    rnd = _Rand(seed)
    prng = SplitMix64(seed + 1)
    f64 = np.float64
    cases = [
        ("stem", Stem(prng, 8, 3, 3, False, f64), rnd(2, 3, 16, 16)),
        ("stem_bias", Stem(prng, 4, 3, 3, True, f64), rnd(2, 3, 12, 12)),
        ("gdblock", GDBlock(prng, 8, [1, 2, 2, 3], False, f64), rnd(2, 8, 8, 8)),
        ("aggregator", _AggWrap(Aggregator(prng, 8, 4, 12, False, f64), 8), rnd(2, 16, 6, 6)),
        ("downsampler_max", Downsampler(6, "max", f64), rnd(2, 6, 7, 7)),
        ("downsampler_avg", Downsampler(6, "avg", f64), rnd(2, 6, 6, 6)),
        ("stage", Stage(prng, StageSpec(8, 16, 2, 4, (1, 2, 2, 3), "max"), False, f64), rnd(2, 8, 8, 8)),
        ("refiner", Refiner(prng, 6, False, f64), rnd(2, 6, 4, 4)),
        ("head", Head(prng, 6, 3, f64), rnd(2, 6, 3, 3)),
    ]
    out = [CheckRecord("blocks", name, _layer_check(layer, x, rnd)) for name, layer, x in cases]

    x = rnd(2, 12, 3, 3)
    perm = recomb_permutation(12, 4)
    res = _project_check(lambda: feature_maps_recomb(x, 4),
                         lambda r: {"x": channel_permute(r, perm.inverse())}, {"x": x}, rnd)
    out.append(CheckRecord("blocks", "feature_maps_recomb", res))
    a, b = rnd(2, 4, 3, 3), rnd(2, 4, 3, 3)
    res = _project_check(lambda: mixed_concatenation(a, b),
                         lambda r: dict(zip("ab", mixed_concatenation_backward(r))), {"a": a, "b": b}, rnd)
    out.append(CheckRecord("blocks", "mixed_concatenation", res))
    return out


# ------------------------------------------------------------------- model

def reduced_config() -> GlimmerNetConfig:
    return GlimmerNetConfig(input_hw=(16, 16), num_classes=3, stem_width=4, blocks_per_stage=(1, 1, 1, 1),
                            stage_widths=(4, 8, 8, 8))


def check_model(seed: int = 0) -> list[CheckRecord]:
    rnd = _Rand(seed)
    model = GlimmerNet(reduced_config(), seed=seed, dtype=np.float64)
    _randomize(model, rnd)
    cfg = model.cfg
    x = rnd(3, 3, *cfg.input_hw)
    labels = np.arange(x.shape[0]) % cfg.num_classes

    def loss():
        return K.softmax_cross_entropy(model.forward(x, True), labels)[0]

    model.store.zero_grad()
    logits = model.forward(x, True)
    dx = model.backward(K.softmax_cross_entropy_backward(1.0, logits, labels))
    params = [("input", x, dx)] + [(p.name, p.value, p.grad) for p in model.store]
    return [CheckRecord("model", "reduced_model_cross_entropy", grad_check(loss, params, atol=_atol(params), retry_above=TOL))]


def run(scope: str, seed: int = 0) -> list[CheckRecord]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    return {"kernels": check_kernels, "blocks": check_blocks, "model": check_model}[scope](seed)
