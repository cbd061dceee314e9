"""
Validation rules for stablefit structures.

Enforces shape constraints, probability ranges, architecture agreement
between checkpoints and finiteness of numeric state.
"""

from typing import Any, Iterable, List, Optional, Sequence

import numpy as np


class StabilityValidationError(ValueError):
    """Raised when a stablefit precondition is violated."""
    pass


class NonFiniteError(StabilityValidationError):
    """Raised when a tensor, gradient, norm or loss stops being finite."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(message)
        self.where = where


class ConfigError(StabilityValidationError):
    """Raised for a malformed experiment configuration."""

    def __init__(self, message: str, path: str = "", expected: str = ""):
        super().__init__(message)
        self.path = path
        self.expected = expected


class ArtifactMissingError(StabilityValidationError):
    """Raised when a referenced artifact does not exist."""

    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path


def ensure_shapes(op: str, condition: bool, *shapes: Sequence[int]) -> None:
    """
    Reject a primitive call whose input shapes violate its shape rule.

    Args:
        op: Primitive name
        condition: Result of the shape rule
        shapes: Offending input shapes, reported in the message

    Raises:
        StabilityValidationError: If the condition is false
    """
    if not condition:
        rendered = " vs ".join(str(tuple(s)) for s in shapes)
        raise StabilityValidationError(f"{op}: incompatible shapes {rendered}")


def ensure_finite(value: Any, where: str) -> None:
    """
    Ensure an array or scalar holds only finite values.

    Raises:
        NonFiniteError: If any entry is NaN or infinite
    """
    arr = np.asarray(value)
    if arr.size and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite values detected", where=where)


def ensure_probability(name: str, value: float, *, upper_inclusive: bool = False) -> None:
    """Ensure a value lies in [0, 1) (or [0, 1] when upper_inclusive)."""
    upper_ok = value <= 1.0 if upper_inclusive else value < 1.0
    if not (0.0 <= value and upper_ok):
        bound = "]" if upper_inclusive else ")"
        raise StabilityValidationError(f"{name} must lie in [0, 1{bound}, got {value}")


def ensure_positive(name: str, value: float, *, allow_zero: bool = False) -> None:
    """Ensure a scalar is positive (or non-negative)."""
    if allow_zero:
        if value < 0:
            raise StabilityValidationError(f"{name} must be >= 0, got {value}")
    elif value <= 0:
        raise StabilityValidationError(f"{name} must be > 0, got {value}")


def ensure_count(name: str, value: int, minimum: int = 1) -> None:
    """Ensure an integer count is at least `minimum`."""
    if int(value) != value or value < minimum:
        raise StabilityValidationError(f"{name} must be an integer >= {minimum}, got {value}")


def ensure_same_architecture(a: Any, b: Any, op: str) -> None:
    """
    Ensure two checkpoints (or model configs) share one architecture.

    Heads are ignored; only encoder shape parameters are compared.

    Raises:
        StabilityValidationError: On any architecture difference
    """
    cfg_a = getattr(a, "config", a)
    cfg_b = getattr(b, "config", b)
    if cfg_a.architecture() != cfg_b.architecture():
        raise StabilityValidationError(
            f"{op} requires checkpoints with one architecture, got "
            f"{cfg_a.architecture()} vs {cfg_b.architecture()}"
        )


def validate_model_config(config: Any) -> List[str]:
    """
    Validate a ModelConfig.

    Returns:
        List of validation errors (empty if valid)
    """
    errors = []
    for field_name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim",
                       "vocab_size", "max_seq_len", "num_classes"):
        value = getattr(config, field_name)
        if not isinstance(value, int) or value < 1:
            errors.append(f"{field_name} must be an integer >= 1, got {value!r}")
    if not errors and config.hidden_dim % config.num_heads != 0:
        errors.append(
            f"hidden_dim {config.hidden_dim} not divisible by num_heads {config.num_heads}"
        )
    if not (0.0 <= config.dropout_p < 1.0):
        errors.append(f"dropout_p must lie in [0, 1), got {config.dropout_p}")
    unknown = [h for h in config.heads if h not in ("mlm", "classifier")]
    if unknown:
        errors.append(f"unknown heads: {unknown}")
    if config.dtype not in ("float32", "float64"):
        errors.append(f"dtype must be float32 or float64, got {config.dtype!r}")
    return errors


def validate_checkpoint(checkpoint: Any) -> List[str]:
    """
    Validate a Checkpoint: config validity plus exact name-set agreement.

    Returns:
        List of validation errors (empty if valid)
    """
    from .model import expected_param_shapes

    errors = validate_model_config(checkpoint.config)
    if errors:
        return errors

    expected = expected_param_shapes(checkpoint.config)
    actual = {name: tuple(arr.shape) for name, arr in checkpoint.params.items()}

    missing = sorted(set(expected) - set(actual))
    extra = sorted(set(actual) - set(expected))
    if missing:
        errors.append(f"missing parameters: {missing}")
    if extra:
        errors.append(f"unexpected parameters: {extra}")
    for name in sorted(set(expected) & set(actual)):
        if expected[name] != actual[name]:
            errors.append(f"{name}: shape {actual[name]} != expected {expected[name]}")
    return errors


def ensure_checkpoint(checkpoint: Any, op: str) -> None:
    """Raise if validate_checkpoint reports any error."""
    errors = validate_checkpoint(checkpoint)
    if errors:
        raise StabilityValidationError(f"{op}: invalid checkpoint: {errors}")


def ensure_token_range(tokens: np.ndarray, vocab_size: int, max_seq_len: Optional[int] = None) -> None:
    """Reject token ids outside [0, vocab_size) or sequences longer than max_seq_len."""
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise StabilityValidationError(
            f"token ids must lie in [0, {vocab_size}), got range "
            f"[{int(tokens.min())}, {int(tokens.max())}]"
        )
    if max_seq_len is not None and tokens.ndim == 2 and tokens.shape[1] > max_seq_len:
        raise StabilityValidationError(
            f"sequence length {tokens.shape[1]} exceeds max_seq_len {max_seq_len}"
        )


def ensure_distinct(name: str, values: Iterable[Any]) -> None:
    """Ensure a sequence holds no duplicates."""
    values = list(values)
    if len(set(values)) != len(values):
        raise StabilityValidationError(f"{name} must be distinct, got {values}")
