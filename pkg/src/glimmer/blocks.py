"""GlimmerNet building blocks: Stem, GDBlock, Aggregator, Downsampler, Stage,
Refiner and Head, plus the channel recombination helpers they rely on."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError
from .layers import (
    GRN,
    BatchNorm,
    Conv2d,
    DWConv,
    GroupedDilatedDWConv,
    GroupedPWConv,
    Layer,
    Linear,
    Pool,
    ReLU6,
    Sequential,
)
from .tensor import ChannelPermutation, channel_permute, check_tensor


# ------------------------------------------------------------ recombination

def recomb_index(i: int, m: int, c: int) -> int:
    """1-based destination of channel ``i`` when m groups of c maps are regrouped
    into c groups of m, each new group holding the same in-group index from
    every original group: ((i - 1) mod c) * m + ceil(i / c)."""
    if m < 1 or c < 1:
        raise ValueError(f"m and c must be >= 1, got m={m}, c={c}")
    if not 1 <= i <= m * c:
        raise ValueError(f"channel index {i} outside 1..{m * c}")
    return ((i - 1) % c) * m + -(-i // c)


def recomb_permutation(channels: int, m: int) -> ChannelPermutation:
    if m < 1 or channels % m:
        raise ShapeError(f"{channels} channels not divisible into {m} groups")
    c = channels // m
    return ChannelPermutation([recomb_index(i, m, c) - 1 for i in range(1, channels + 1)])


def feature_maps_recomb(x: np.ndarray, m: int) -> np.ndarray:
    """Transpose the channel layout from (m groups x c) to (c groups x m)."""
    check_tensor(x)
    return channel_permute(x, recomb_permutation(x.shape[1], m))


def mixed_concatenation(r: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Interleave channels: output 2j <- r[j], 2j+1 <- x[j]."""
    check_tensor(r, "r")
    check_tensor(x)
    if r.shape != x.shape:
        raise ShapeError(f"mixed_concatenation: {r.shape} vs {x.shape}")
    n, c, h, w = r.shape
    return np.stack([r, x], axis=2).reshape(n, 2 * c, h, w)


def mixed_concatenation_backward(dy: np.ndarray):
    n, c2, h, w = dy.shape
    pairs = dy.reshape(n, c2 // 2, 2, h, w)
    return np.ascontiguousarray(pairs[:, :, 0]), np.ascontiguousarray(pairs[:, :, 1])


# ------------------------------------------------------------------ specs

@dataclass(frozen=True)
class StageSpec:
    in_channels: int
    out_channels: int
    num_gdblocks: int
    m: int
    dilations: tuple[int, ...]
    pool_kind: str = "max"

    def __post_init__(self):
        if self.num_gdblocks < 1:
            raise ConfigError("num_gdblocks", f"must be >= 1, got {self.num_gdblocks}")
        if self.m < 1 or self.in_channels % self.m:
            raise ConfigError("in_channels", f"{self.in_channels} not divisible by m={self.m}")
        if len(self.dilations) != self.m:
            raise ConfigError("dilations", f"expected {self.m} entries, got {len(self.dilations)}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations", f"every dilation must be >= 1, got {list(self.dilations)}")
        if self.out_channels % self.group_size:
            raise ConfigError("out_channels", f"{self.out_channels} not divisible by "
                                              f"{self.group_size} aggregator groups")
        if self.pool_kind not in ("max", "avg"):
            raise ConfigError("pool_kinds", f"unknown pool kind {self.pool_kind!r}")

    @property
    def group_size(self) -> int:
        """Maps per dilation group (c); also the aggregator's group count."""
        return self.in_channels // self.m


# ----------------------------------------------------------------- blocks

class Stem(Sequential):
    """Dense stride-2 conv then depthwise stride-2 conv, each with BN + ReLU6."""

    def __init__(self, rng, width, in_channels=3, kernel=3, bias=False, dtype=np.float32):
        pad = kernel // 2
        super().__init__(
            ("conv", Conv2d(rng, in_channels, width, kernel, 2, pad, bias, dtype)),
            ("bn1", BatchNorm(width, dtype)),
            ("act1", ReLU6()),
            ("dwconv", DWConv(rng, width, 3, stride=2, padding=1, bias=bias, dtype=dtype)),
            ("bn2", BatchNorm(width, dtype)),
            ("act2", ReLU6()),
        )
        self.in_channels = in_channels

    def forward(self, x, train=True):
        if x.shape[1] != self.in_channels:
            raise ShapeError(f"stem expects {self.in_channels} input channels, got {x.shape[1]}")
        return super().forward(x, train)


class GDBlock(Layer):
    """out = x + ReLU6(BN(GroupedDilatedDWConv(x)))."""

    def __init__(self, rng, width, dilations, bias=False, dtype=np.float32):
        super().__init__()
        self.width = width
        self.branch = Sequential(
            ("dwconv", GroupedDilatedDWConv(rng, width, dilations, 3, bias, dtype)),
            ("bn", BatchNorm(width, dtype)),
            ("act", ReLU6()),
        )

    def children(self):
        return self.branch.layers

    def forward(self, x, train=True):
        if x.shape[1] != self.width:
            raise ShapeError(f"GDBlock of width {self.width} got {x.shape[1]} channels")
        return x + self.branch.forward(x, train)

    def backward(self, dy):
        return dy + self.branch.backward(dy)


class Aggregator(Layer):
    """Recombine GDBlock output, interleave with the stage input, then a grouped
    1x1 conv with c groups of 2m inputs, BN and ReLU6."""

    def __init__(self, rng, width, m, out_channels, bias=False, dtype=np.float32):
        super().__init__()
        if width % m or out_channels % (width // m):
            raise ShapeError(f"aggregator: width {width}, m {m}, out {out_channels} incompatible")
        self.width, self.m, self.out_channels = width, m, out_channels
        self.perm = recomb_permutation(width, m)
        self.pwconv = GroupedPWConv(rng, 2 * width, out_channels, width // m, bias, dtype)
        self.bn = BatchNorm(out_channels, dtype)
        self.act = ReLU6()

    def children(self):
        return [("pwconv", self.pwconv), ("bn", self.bn), ("act", self.act)]

    def forward(self, gd_out, stage_in, train=True):
        if gd_out.shape != stage_in.shape or gd_out.shape[1] != self.width:
            raise ShapeError(f"aggregator inputs {gd_out.shape}, {stage_in.shape} (width {self.width})")
        mixed = mixed_concatenation(channel_permute(gd_out, self.perm), stage_in)
        return self.act.forward(self.bn.forward(self.pwconv.forward(mixed, train), train), train)

    def backward(self, dy):
        dmixed = self.pwconv.backward(self.bn.backward(self.act.backward(dy)))
        dr, dstage = mixed_concatenation_backward(dmixed)
        return channel_permute(dr, self.perm.inverse()), dstage


class Downsampler(Sequential):
    """2x2 stride-2 pooling followed by GRN.

    Pooling runs in ceil mode so odd extents (7x7 at the last stage of the
    224 px config) keep their trailing partial window.
    """

    def __init__(self, channels, pool_kind="max", dtype=np.float32):
        super().__init__(("pool", Pool(pool_kind, 2, 2, ceil_mode=True)), ("grn", GRN(channels, dtype)))


class Stage(Layer):
    def __init__(self, rng, spec: StageSpec, bias=False, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.blocks = [GDBlock(rng, spec.in_channels, spec.dilations, bias, dtype)
                       for _ in range(spec.num_gdblocks)]
        self.agg = Aggregator(rng, spec.in_channels, spec.m, spec.out_channels, bias, dtype)
        self.down = Downsampler(spec.out_channels, spec.pool_kind, dtype)
        self.last_block_out = None

    def children(self):
        named = [(f"block{j + 1}", b) for j, b in enumerate(self.blocks)]
        return named + [("agg", self.agg), ("down", self.down)]

    def forward(self, x, train=True):
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"stage expects {self.spec.in_channels} channels, got {x.shape[1]}")
        h = x
        for block in self.blocks:
            h = block.forward(h, train)
        self.last_block_out = h
        return self.down.forward(self.agg.forward(h, x, train), train)

    def backward(self, dy):
        dh, dx = self.agg.backward(self.down.backward(dy))
        for block in reversed(self.blocks):
            dh = block.backward(dh)
        return dx + dh


class Refiner(Sequential):
    def __init__(self, rng, width, bias=False, dtype=np.float32):
        super().__init__(("dwconv", DWConv(rng, width, 3, bias=bias, dtype=dtype)),
                         ("bn", BatchNorm(width, dtype)))


class Head(Layer):
    """Global average pooling, flatten, fully connected."""

    def __init__(self, rng, width, num_classes, dtype=np.float32):
        super().__init__()
        self.fc = Linear(rng, width, num_classes, dtype)

    def children(self):
        return [("fc", self.fc)]

    def forward(self, x, train=True):
        self._cache = x
        return self.fc.forward(K.global_avg_pool(x).reshape(x.shape[0], x.shape[1]), train)

    def backward(self, dy):
        x = self._saved()
        dflat = self.fc.backward(dy)
        return K.global_avg_pool_backward(dflat.reshape(x.shape[0], x.shape[1], 1, 1), x)


# ------------------------------------------------------------ visualization

def write_pgm(path: str, image: np.ndarray) -> None:
    """Binary 8-bit greyscale PGM (P5)."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def group_feature_images(x: np.ndarray, m: int) -> list[np.ndarray]:
    """Channel-mean of each of the m groups of sample 0, min-max scaled to 0..255."""
    check_tensor(x)
    if x.shape[1] % m:
        raise ShapeError(f"{x.shape[1]} channels not divisible into {m} groups")
    c = x.shape[1] // m
    images = []
    for g in range(m):
        avg = x[0, g * c:(g + 1) * c].astype(np.float64).mean(axis=0)
        lo, hi = avg.min(), avg.max()
        if hi - lo > 0:
            scaled = (avg - lo) / (hi - lo) * 255.0
        else:
            scaled = np.full_like(avg, 128.0)
        images.append(np.rint(scaled).astype(np.uint8))
    return images


def dump_group_features(x: np.ndarray, m: int, path_prefix: str) -> list[str]:
    """Write one PGM per dilation group; returns the file paths."""
    paths = []
    directory = os.path.dirname(path_prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    for g, image in enumerate(group_feature_images(x, m)):
        path = f"{path_prefix}_group{g + 1}.pgm"
        write_pgm(path, image)
        paths.append(path)
    return paths


def stage_specs(widths: Sequence[int], blocks: Sequence[int], m: int, dilations: Sequence[int],
                pool_kinds: Sequence[str]) -> list[StageSpec]:
    """Stage i runs its GDBlocks at widths[i]; its aggregator expands to
    widths[i + 1] (the last stage keeps its width)."""
    specs = []
    for i, (w, b, pk) in enumerate(zip(widths, blocks, pool_kinds)):
        out = widths[i + 1] if i + 1 < len(widths) else w
        specs.append(StageSpec(w, out, b, m, tuple(dilations), pk))
    return specs


__all__ = [
    "recomb_index", "recomb_permutation", "feature_maps_recomb", "mixed_concatenation",
    "mixed_concatenation_backward", "StageSpec", "Stem", "GDBlock", "Aggregator",
    "Downsampler", "Stage", "Refiner", "Head", "write_pgm", "group_feature_images",
    "dump_group_features", "stage_specs",
]
