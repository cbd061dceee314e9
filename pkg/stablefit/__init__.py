"""
stablefit - fine-tuning stability experiments on a toy transformer.

A deterministic, CPU-only harness: a small BERT-style encoder trained with
ADAM (bias correction switchable), multi-seed sweeps with Levene variance
tests, loss/gradient-norm surfaces, and a layer-substitution forgetting probe.
"""

__version__ = "0.1.0"
__author__ = "stablefit developers"

from .core.types import AdamConfig, Checkpoint, ModelConfig, RunConfig, RunRecord, ScheduleConfig
from .core.validate import StabilityValidationError, NonFiniteError, ConfigError, ArtifactMissingError
from .core.optim import adam_update, bias_correction_factor, warmup_linear_lr, preset
from .core.model import init_checkpoint, forward_classify, forward_mlm, substitute_top_layers
from .core.training import run_finetune, run_pretrain, classify_failed_run
from .core.metrics import levene_test, mcc, f1, accuracy
from .core.sweep import SweepPlan, run_sweep, iterations_matched_epochs, compare_stability, emit_report
from .core.landscape import SurfaceSpec, loss_surface, gradient_norm_surface
from .core.forgetting import substitution_curve, failure_signature
from .core.serialize import load_checkpoint, save_checkpoint

__all__ = [
    # Types
    "AdamConfig",
    "Checkpoint",
    "ModelConfig",
    "RunConfig",
    "RunRecord",
    "ScheduleConfig",
    # Errors
    "StabilityValidationError",
    "NonFiniteError",
    "ConfigError",
    "ArtifactMissingError",
    # Optimizer
    "adam_update",
    "bias_correction_factor",
    "warmup_linear_lr",
    "preset",
    # Model
    "init_checkpoint",
    "forward_classify",
    "forward_mlm",
    "substitute_top_layers",
    # Training
    "run_finetune",
    "run_pretrain",
    "classify_failed_run",
    # Statistics
    "levene_test",
    "mcc",
    "f1",
    "accuracy",
    # Sweeps
    "SweepPlan",
    "run_sweep",
    "iterations_matched_epochs",
    "compare_stability",
    "emit_report",
    # Probes
    "SurfaceSpec",
    "loss_surface",
    "gradient_norm_surface",
    "substitution_curve",
    "failure_signature",
    # Serialization
    "load_checkpoint",
    "save_checkpoint",
]
