"""
Core stablefit modules.
"""

from .types import ModelConfig, AdamConfig, RunConfig, RunRecord, Checkpoint
from .validate import StabilityValidationError
from .params import ParamStore
from .rng import RngStream

__all__ = [
    "ModelConfig",
    "AdamConfig",
    "RunConfig",
    "RunRecord",
    "Checkpoint",
    "StabilityValidationError",
    "ParamStore",
    "RngStream",
]
