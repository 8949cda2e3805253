"""Config-driven GlimmerNet construction and the parameter registry."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .blocks import Head, Refiner, Stage, Stem, stage_specs
from .errors import ConfigError, ShapeError
from .layers import Layer
from .prng import SplitMix64

FLOP_CONVENTIONS = ("mac2", "mac1", "profiler")


@dataclass(frozen=True)
class GlimmerNetConfig:
    input_hw: tuple[int, int] = (224, 224)
    num_classes: int = 4
    stem_width: int = 40
    num_stages: int = 4
    blocks_per_stage: tuple[int, ...] = (4, 4, 4, 1)
    stage_widths: tuple[int, ...] = (40, 80, 160, 240)
    m: int = 4
    dilations: tuple[int, ...] = (1, 2, 2, 3)
    pool_kinds: tuple[str, ...] = ("max", "max", "max", "avg")
    flop_convention: str = "mac2"
    conv_bias: bool = False
    stem_kernel: int = 3
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        for name in ("input_hw", "blocks_per_stage", "stage_widths", "dilations", "pool_kinds", "class_names"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if len(self.input_hw) != 2 or any(v < 4 or v % 4 for v in self.input_hw):
            raise ConfigError("input_hw", f"H and W must be positive multiples of 4, got {self.input_hw}")
        if self.num_classes < 1:
            raise ConfigError("num_classes", f"must be >= 1, got {self.num_classes}")
        if self.class_names and len(self.class_names) != self.num_classes:
            raise ConfigError("class_names", f"{len(self.class_names)} names for {self.num_classes} classes")
        if self.num_stages < 1:
            raise ConfigError("num_stages", f"must be >= 1, got {self.num_stages}")
        for name in ("blocks_per_stage", "stage_widths", "pool_kinds"):
            if len(getattr(self, name)) != self.num_stages:
                raise ConfigError(name, f"expected {self.num_stages} entries, got {len(getattr(self, name))}")
        if any(b < 1 for b in self.blocks_per_stage):
            raise ConfigError("blocks_per_stage", f"every stage needs >= 1 GDBlock, got {self.blocks_per_stage}")
        if self.m < 1:
            raise ConfigError("m", f"must be >= 1, got {self.m}")
        if len(self.dilations) != self.m:
            raise ConfigError("dilations", f"expected m={self.m} entries, got {len(self.dilations)}")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations", f"every dilation must be >= 1, got {self.dilations}")
        for i, w in enumerate(self.stage_widths):
            if w < 1 or w % self.m:
                raise ConfigError("stage_widths", f"stage {i + 1} width {w} not divisible by m={self.m}")
            out = self.stage_widths[i + 1] if i + 1 < self.num_stages else w
            if out % (w // self.m):
                raise ConfigError("stage_widths", f"stage {i + 1} aggregator output {out} not divisible "
                                                  f"by its {w // self.m} groups (width / m)")
        if self.stem_width != self.stage_widths[0]:
            raise ConfigError("stem_width", f"{self.stem_width} must equal stage_widths[0]={self.stage_widths[0]}")
        if any(k not in ("max", "avg") for k in self.pool_kinds):
            raise ConfigError("pool_kinds", f"entries must be 'max' or 'avg', got {self.pool_kinds}")
        if self.flop_convention not in FLOP_CONVENTIONS:
            raise ConfigError("flop_convention", f"must be one of {FLOP_CONVENTIONS}")
        if self.stem_kernel < 1 or self.stem_kernel % 2 == 0:
            raise ConfigError("stem_kernel", f"must be odd, got {self.stem_kernel}")

    def stages(self):
        return stage_specs(self.stage_widths, self.blocks_per_stage, self.m, self.dilations, self.pool_kinds)

    @property
    def final_width(self) -> int:
        return self.stage_widths[-1]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "GlimmerNetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown config field")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError("config", str(exc)) from None

    @classmethod
    def load(cls, path: str) -> "GlimmerNetConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("config", f"invalid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top-level JSON value must be an object")
        return cls.from_dict(data)


def paper_config_aiderv2(**overrides) -> GlimmerNetConfig:
    cfg = GlimmerNetConfig(class_names=("Earthquakes", "Flood", "Fire", "Normal"))
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def block_variant_config(blocks: tuple[int, int, int, int], **overrides) -> GlimmerNetConfig:
    """AIDERv2 config with a different GDBlock count per stage."""
    return paper_config_aiderv2(blocks_per_stage=tuple(blocks), **overrides)


def tinyimagenet_config(**overrides) -> GlimmerNetConfig:
    cfg = GlimmerNetConfig(
        input_hw=(64, 64), num_classes=200, stem_width=40, num_stages=6,
        blocks_per_stage=(6, 5, 5, 4, 3, 1), stage_widths=(40, 80, 160, 320, 640, 640),
        m=5, dilations=(1, 1, 2, 2, 3), pool_kinds=("max",) * 5 + ("avg",),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def desk_config(**overrides) -> GlimmerNetConfig:
    """Reduced model for CPU-scale training runs on 32x32 synthetic data.

    Widths are (8, 16, 24, 48): the stage-3 aggregator has 24 / 4 = 6 groups,
    so its output width must be a multiple of 6 (40 is not).
    """
    cfg = GlimmerNetConfig(
        input_hw=(32, 32), num_classes=4, stem_width=8, blocks_per_stage=(1, 1, 1, 1),
        stage_widths=(8, 16, 24, 48),
    )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


# ----------------------------------------------------------------- registry

@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray
    slots: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParamStore:
    """Ordered, name-addressed parameters. Values and grads alias the layers'
    arrays, so in-place updates here are seen by the model."""

    def __init__(self, entries: list[Param]):
        self._entries: dict[str, Param] = {}
        for p in entries:
            if p.name in self._entries:
                raise ValueError(f"duplicate parameter name {p.name!r}")
            self._entries[p.name] = p

    def __iter__(self) -> Iterator[Param]:
        return iter(self._entries.values())

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, name: str) -> Param:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0

    def total_size(self) -> int:
        return sum(p.size for p in self)


class GlimmerNet(Layer):
    def __init__(self, cfg: GlimmerNetConfig, seed: int = 42, dtype=np.float32):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = SplitMix64(seed)
        bias = cfg.conv_bias
        self.stem = Stem(rng, cfg.stem_width, 3, cfg.stem_kernel, bias, dtype)
        self.stages = [Stage(rng, spec, bias, dtype) for spec in cfg.stages()]
        self.refiner = Refiner(rng, cfg.final_width, bias, dtype)
        self.head = Head(rng, cfg.final_width, cfg.num_classes, dtype)
        self.store = ParamStore([Param(name, layer.params[key], layer.grads[key])
                                 for name, layer, key in self.named_params()])
        self.buffers = dict(self.named_buffers())

    def children(self):
        named = [("stem", self.stem)]
        named += [(f"stage{i + 1}", s) for i, s in enumerate(self.stages)]
        return named + [("refiner", self.refiner), ("head", self.head)]

    def forward(self, x: np.ndarray, train: bool = True) -> np.ndarray:
        h, w = self.cfg.input_hw
        if x.ndim != 4 or x.shape[1:] != (3, h, w):
            raise ShapeError(f"model expects input (n, 3, {h}, {w}), got {x.shape}")
        x = self.stem.forward(x.astype(self.dtype, copy=False), train)
        for stage in self.stages:
            x = stage.forward(x, train)
        return self.head.forward(self.refiner.forward(x, train), train)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        dy = self.refiner.backward(self.head.backward(dlogits))
        for stage in reversed(self.stages):
            dy = stage.backward(dy)
        return self.stem.backward(dy)

    def state_entries(self) -> list[tuple[str, np.ndarray]]:
        """Everything a checkpoint holds: parameters then buffers, in order."""
        return [(p.name, p.value) for p in self.store] + list(self.buffers.items())


def build(cfg: GlimmerNetConfig, seed: int = 42, dtype=np.float32) -> GlimmerNet:
    return GlimmerNet(cfg, seed, dtype)


def model_forward(model: GlimmerNet, x: np.ndarray, mode: str = "infer") -> np.ndarray:
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return model.forward(x, train=mode == "train")
