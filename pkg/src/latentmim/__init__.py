"""Masked image pretraining with latent targets, prompting decoders and
attention-guided mask sampling, at desk scale."""

from latentmim.config import DecoderConfig, TeacherConfig, TrainConfig, ViTConfig
from latentmim.errors import (
    CheckpointFormatError,
    ConfigError,
    DimensionError,
    NumericError,
    ReassemblyError,
    SchemaError,
    UnsupportedTeacherError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointFormatError",
    "ConfigError",
    "DecoderConfig",
    "DimensionError",
    "NumericError",
    "ReassemblyError",
    "SchemaError",
    "TeacherConfig",
    "TrainConfig",
    "UnsupportedTeacherError",
    "ViTConfig",
]
