"""Specular highlight removal network built on a small numpy autodiff core."""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    CheckpointError,
    ChecksumError,
    ConfigError,
    ConfigMismatchError,
    ImageFormatError,
    MagicMismatchError,
    NumericalError,
    ShapeError,
    TruncatedCheckpointError,
)
from .network import ModelConfig, ParamStore, SHRNet, build_model, count_flops, count_params  # noqa: E402
from .tensor import Tensor, default_dtype, no_grad  # noqa: E402

__all__ = [
    "__version__",
    "Tensor",
    "default_dtype",
    "no_grad",
    "ModelConfig",
    "ParamStore",
    "SHRNet",
    "build_model",
    "count_params",
    "count_flops",
    "ShapeError",
    "NumericalError",
    "ConfigError",
    "CheckpointError",
    "ChecksumError",
    "MagicMismatchError",
    "TruncatedCheckpointError",
    "ConfigMismatchError",
    "ImageFormatError",
]
