"""Optimizer, learning-rate schedule, training loop, metrics and the
finite-difference gradient checker."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels as K
from .errors import ShapeError
from .model import GlimmerNet, ParamStore
from .prng import SplitMix64

AUGMENTS = ("none", "hflip")


@dataclass(frozen=True)
class OptimHyper:
    lr0: float = 1e-3
    gamma: float = 0.975
    step_size: int = 2
    rmsprop_alpha: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-5
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.step_size < 1:
            raise ValueError(f"step_size must be >= 1, got {self.step_size}")
        for name in ("rmsprop_alpha", "momentum"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")


def lr_at_epoch(i: int, h: OptimHyper) -> float:
    """Step decay: lr0 * gamma ** floor(i / step_size)."""
    if i < 0:
        raise ValueError(f"epoch must be >= 0, got {i}")
    return h.lr0 * h.gamma ** (i // h.step_size)


def init_slots(store: ParamStore) -> None:
    for p in store:
        p.slots.setdefault("square_avg", np.zeros_like(p.value))
        p.slots.setdefault("momentum_buffer", np.zeros_like(p.value))


def rmsprop_step(store: ParamStore, h: OptimHyper, lr: float) -> None:
    """One in-place RMSProp update with momentum and coupled weight decay.

    Slots are created by :func:`init_slots`; grads are left untouched.
    """
    a, mu = h.rmsprop_alpha, h.momentum
    for p in store:
        try:
            v, buf = p.slots["square_avg"], p.slots["momentum_buffer"]
        except KeyError:
            raise KeyError(f"{p.name}: optimizer slots missing; call init_slots first") from None
        g = p.grad + h.weight_decay * p.value if h.weight_decay else p.grad
        v *= a
        v += (1.0 - a) * g * g
        buf *= mu
        buf += g / (np.sqrt(v) + h.eps)
        p.value -= lr * buf


# ------------------------------------------------------------------ metrics

@dataclass
class MetricReport:
    accuracy: float
    precision: list[float]
    recall: list[float]
    f1: list[float]
    support: list[int]
    weighted_f1: float
    confusion: list[list[int]]  # rows: true class, cols: predicted

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def weighted_f1(preds, labels, num_classes: int) -> MetricReport:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.size == 0:
        raise ValueError("weighted_f1: empty input")
    if preds.shape != labels.shape:
        raise ShapeError(f"preds {preds.shape} vs labels {labels.shape}")
    for arr, name in ((preds, "preds"), (labels, "labels")):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ValueError(f"{name} must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    wf1 = float(np.sum(f1 * support) / support.sum())
    return MetricReport(
        accuracy=float(tp.sum() / preds.size), precision=precision.tolist(), recall=recall.tolist(),
        f1=f1.tolist(), support=support.tolist(), weighted_f1=wf1, confusion=cm.tolist())


# ----------------------------------------------------------------- training

@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W)
    labels: np.ndarray  # (N,)
    class_names: tuple[str, ...] = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"images {self.images.shape} vs labels {self.labels.shape}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])


def _hflip(batch: np.ndarray, rng: SplitMix64) -> np.ndarray:
    flip = (rng.u64(batch.shape[0]) >> np.uint64(63)).astype(bool)
    out = batch.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def train_step(model: GlimmerNet, x: np.ndarray, y: np.ndarray, h: OptimHyper, lr: float):
    """Forward, loss, backward and update on one batch. Returns (loss, logits)."""
    model.store.zero_grad()
    logits = model.forward(x, train=True)
    loss, _ = K.softmax_cross_entropy(logits, y)
    model.backward(K.softmax_cross_entropy_backward(1.0, logits, y))
    rmsprop_step(model.store, h, lr)
    return loss, logits


def train_epochs(model: GlimmerNet, dataset: Dataset, h: OptimHyper, epochs: int, batch_size: int,
                 seed: int = 42, augment: str = "none",
                 on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Seeded mini-batch training; returns one log record per epoch.

    Each record is {epoch, lr, loss, train_acc}, where loss and accuracy are
    sample-weighted means over the epoch's (possibly augmented) batches.
    """
    if len(dataset) == 0:
        raise ValueError("train_epochs: empty dataset")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if augment not in AUGMENTS:
        raise ValueError(f"augment must be one of {AUGMENTS}, got {augment!r}")
    init_slots(model.store)
    rng = SplitMix64(seed)
    n = len(dataset)
    images = dataset.images.astype(model.dtype, copy=False)
    log = []
    for epoch in range(epochs):
        lr = lr_at_epoch(epoch, h)
        order = np.asarray(rng.permutation(n), dtype=np.int64)
        total_loss, correct = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            x, y = images[idx], dataset.labels[idx]
            if augment == "hflip":
                x = _hflip(x, rng)
            loss, logits = train_step(model, x, y, h, lr)
            total_loss += loss * idx.size
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
        record = {"epoch": epoch, "lr": lr, "loss": total_loss / n, "train_acc": correct / n}
        log.append(record)
        if on_epoch is not None:
            on_epoch(record)
    return log


def predict(model: GlimmerNet, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Inference-mode logits."""
    out = [model.forward(images[i:i + batch_size], train=False) for i in range(0, images.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(model: GlimmerNet, dataset: Dataset, batch_size: int = 64) -> MetricReport:
    logits = predict(model, dataset.images, batch_size)
    return weighted_f1(np.argmax(logits, axis=1), dataset.labels, model.cfg.num_classes)


def moving_average(values: Sequence[float], window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.empty(0)
    return np.convolve(v, np.ones(window) / window, mode="valid")


def log_lines(log: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in log)


# ---------------------------------------------------------------- gradcheck

@dataclass
class GradCheckResult:
    max_rel_err: float
    worst: tuple[str, int] | None
    per_tensor: dict = field(default_factory=dict)
    nonfinite: list = field(default_factory=list)
    within_atol: int = 0
    retried: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return not self.nonfinite and self.max_rel_err < tol


def rel_err(a, n) -> np.ndarray:
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def grad_check(f: Callable[[], float], params: Sequence[tuple[str, np.ndarray, np.ndarray]],
               eps: float = 1e-5, samples: int = 64, seed: int = 0, atol: float = 0.0,
               retry_above: float | None = None) -> GradCheckResult:
    """Central-difference check of analytic gradients.

    ``f`` evaluates the scalar objective from the current contents of the
    arrays in ``params``; each entry is (name, value array, analytic grad).
    Values are perturbed in place and restored. Tensors larger than
    ``samples`` are checked at ``samples`` seeded random coordinates.

    ``atol > 0`` accepts a coordinate whose analytic and numerical values
    differ by at most ``atol``. This covers gradients that are exactly zero in
    theory (a per-channel shift removed by a following train-mode BatchNorm)
    where the central difference only sees roundoff; such coordinates are
    counted in ``within_atol`` when their relative error exceeds 1e-6.

    ``retry_above``: a coordinate whose relative error exceeds this is
    re-measured with steps eps/10 and eps/100 and the smallest error kept,
    so a perturbation that straddles a kink (ReLU6 clamp, max-pool switch)
    in a deep composite is not mistaken for a wrong gradient.
    """
    rng = SplitMix64(seed)
    result = GradCheckResult(0.0, None)

    def central(flat, i, h):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        return (fp - fm) / (2 * h)

    def error(a, n):
        if atol and abs(a - n) <= atol:
            return 0.0
        return float(rel_err(a, n))

    for name, value, analytic in params:
        if value.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 arrays; {name} is {value.dtype}")
        if value.shape != analytic.shape:
            raise ShapeError(f"{name}: grad shape {analytic.shape} != value shape {value.shape}")
        flat, gflat = value.reshape(-1), analytic.reshape(-1)
        if value.size <= samples:
            coords = range(value.size)
        else:
            picked: dict[int, None] = {}
            while len(picked) < samples:
                picked[rng.randbelow(value.size)] = None
            coords = list(picked)
        worst = 0.0
        for i in coords:
            a = float(gflat[i])
            num = central(flat, i, eps)
            if not (math.isfinite(num) and math.isfinite(a)):
                result.nonfinite.append((name, int(i)))
                continue
            err = error(a, num)
            if retry_above is not None and err > retry_above:
                for h in (eps / 10, eps / 100):
                    num = central(flat, i, h)
                    err = min(err, error(a, num))
                result.retried += 1
            if err == 0.0 and float(rel_err(a, num)) > 1e-6:
                result.within_atol += 1
            if err > worst:
                worst = err
            if err > result.max_rel_err:
                result.max_rel_err, result.worst = err, (name, int(i))
        result.per_tensor[name] = worst
    return result
