"""GlimmerNet: grouped dilated depthwise convolutions for small-footprint
image classification, implemented on numpy with explicit forward/backward
kernels."""
from .costs import count_flops, count_params, summary, verify_counts
from .errors import ConfigError, DataError, FormatError, ShapeError
from .model import (
    GlimmerNet,
    GlimmerNetConfig,
    build,
    desk_config,
    model_forward,
    paper_config_aiderv2,
    block_variant_config,
    tinyimagenet_config,
)

__version__ = "0.1.0"

__all__ = [
    "GlimmerNet", "GlimmerNetConfig", "build", "model_forward", "paper_config_aiderv2",
    "block_variant_config", "tinyimagenet_config", "desk_config", "count_params", "count_flops",
    "summary", "verify_counts", "ConfigError", "DataError", "FormatError", "ShapeError",
]
