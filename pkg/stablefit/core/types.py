"""
Core types for stablefit.

Defines the configuration and record structures shared across modules:
ModelConfig, Checkpoint, AdamConfig, AdamState, ScheduleConfig, RunConfig,
RunRecord.
"""

import copy
import fnmatch
import math
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .params import ParamStore
from .validate import StabilityValidationError, ensure_count, ensure_positive, ensure_probability


class Mode(str, Enum):
    """Forward-pass mode; eval disables dropout."""
    TRAIN = "train"
    EVAL = "eval"


class MetricName(str, Enum):
    """Task metric tags."""
    ACCURACY = "accuracy"
    F1 = "f1"
    MCC = "mcc"
    PERPLEXITY = "perplexity"


class ScheduleKind(str, Enum):
    """Learning-rate schedule families."""
    WARMUP_LINEAR = "warmup-linear"
    CONSTANT = "constant"


HEAD_ORDER = ("mlm", "classifier")
DEFAULT_DECAY_EXEMPT = ("*.bias", "*.ln*.gain", "*.ln*.offset")


@dataclass(frozen=True)
class ModelConfig:
    """
    Shape of the toy BERT-style encoder.

    Attributes:
        num_layers: Encoder depth
        hidden_dim: Model width; divisible by num_heads
        num_heads: Attention heads per layer
        ffn_dim: Feed-forward inner width
        vocab_size: Token vocabulary (ids 0 and 1 are [CLS] and [MASK])
        max_seq_len: Learned position table length
        dropout_p: Dropout probability in [0, 1)
        num_classes: Classifier output width
        heads: Task heads present in the parameter set ("mlm", "classifier")
        dtype: "float32" for training, "float64" for verification
    """
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 256
    max_seq_len: int = 32
    dropout_p: float = 0.1
    num_classes: int = 2
    heads: Tuple[str, ...] = HEAD_ORDER
    dtype: str = "float32"

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def architecture(self) -> Tuple[int, ...]:
        """Encoder shape; heads, dropout and dtype excluded."""
        return (self.num_layers, self.hidden_dim, self.num_heads, self.ffn_dim,
                self.vocab_size, self.max_seq_len)

    def with_heads(self, heads: Tuple[str, ...]) -> "ModelConfig":
        ordered = tuple(h for h in HEAD_ORDER if h in heads)
        return _replace(self, heads=ordered)

    def replace(self, **changes: Any) -> "ModelConfig":
        return _replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["heads"] = list(self.heads)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        data = dict(data)
        if "heads" in data:
            data["heads"] = tuple(data["heads"])
        return cls(**data)


def _replace(obj: Any, **changes: Any) -> Any:
    values = {f.name: getattr(obj, f.name) for f in fields(obj)}
    values.update(changes)
    return type(obj)(**values)


@dataclass
class Checkpoint:
    """
    A model configuration paired with its parameters.

    Attributes:
        config: ModelConfig whose implied name set the params match
        params: ParamStore
        provenance: Free-text label ("pretrained", "finetuned-seed7", ...)
    """
    config: ModelConfig
    params: ParamStore
    provenance: str = ""

    def hash(self) -> str:
        return self.params.hash()

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, self.params.copy(), self.provenance)


@dataclass(frozen=True)
class AdamConfig:
    """
    ADAM with decoupled weight decay.

    Attributes:
        alpha: Base learning rate
        beta1, beta2: Moment decay rates in [0, 1)
        epsilon: Added after the square root of the second moment
        weight_decay_lambda: Decoupled decay coefficient (>= 0)
        bias_correction: Apply the step-size factor sqrt(1-b2^t)/(1-b1^t)
        clip_norm: Global gradient-norm clip; None disables clipping
        decay_exempt: fnmatch patterns of parameter names excluded from decay
    """
    alpha: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-6
    weight_decay_lambda: float = 0.01
    bias_correction: bool = False
    clip_norm: Optional[float] = 1.0
    decay_exempt: Tuple[str, ...] = DEFAULT_DECAY_EXEMPT

    def __post_init__(self) -> None:
        ensure_probability("beta1", self.beta1)
        ensure_probability("beta2", self.beta2)
        ensure_positive("alpha", self.alpha, allow_zero=True)
        # epsilon = 0 is accepted for hand-traced oracle runs
        ensure_positive("epsilon", self.epsilon, allow_zero=True)
        ensure_positive("weight_decay_lambda", self.weight_decay_lambda, allow_zero=True)
        if self.clip_norm is not None:
            ensure_positive("clip_norm", self.clip_norm)

    def decays(self, name: str) -> bool:
        return not any(fnmatch.fnmatchcase(name, pattern) for pattern in self.decay_exempt)

    def replace(self, **changes: Any) -> "AdamConfig":
        return _replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["decay_exempt"] = list(self.decay_exempt)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AdamConfig":
        data = dict(data)
        if "decay_exempt" in data:
            data["decay_exempt"] = tuple(data["decay_exempt"])
        return cls(**data)


@dataclass
class AdamState:
    """First/second moment estimates (float64) and the step counter."""
    step: int
    m: ParamStore
    v: ParamStore

    @classmethod
    def zeros(cls, params: ParamStore) -> "AdamState":
        return cls(step=0, m=params.zeros_like(np.float64), v=params.zeros_like(np.float64))


@dataclass(frozen=True)
class ScheduleConfig:
    """
    Learning-rate schedule over T optimizer steps.

    The warmup step count is W = floor(w*T + 0.5) (round half up).
    """
    total_steps: int
    warmup_ratio: float = 0.1
    base_lr: float = 2e-5
    kind: str = ScheduleKind.WARMUP_LINEAR.value

    def __post_init__(self) -> None:
        ensure_count("total_steps", self.total_steps)
        ensure_probability("warmup_ratio", self.warmup_ratio)
        ensure_positive("base_lr", self.base_lr, allow_zero=True)
        if self.kind not in {k.value for k in ScheduleKind}:
            raise StabilityValidationError(f"unknown schedule kind: {self.kind!r}")
        if self.warmup_steps >= self.total_steps:
            raise StabilityValidationError(
                f"warmup steps {self.warmup_steps} must be < total steps {self.total_steps}"
            )

    @property
    def warmup_steps(self) -> int:
        return int(math.floor(self.warmup_ratio * self.total_steps + 0.5))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScheduleConfig":
        return cls(**data)


@dataclass(frozen=True)
class RunConfig:
    """
    One training run.

    Exactly one of ``epochs`` and ``total_iterations`` is set. When
    ``schedule`` is None it is derived from the iteration count,
    ``warmup_ratio``, ``schedule_kind`` and ``adam.alpha``.
    """
    seed: int = 0
    epochs: Optional[int] = 3
    total_iterations: Optional[int] = None
    batch_size: int = 16
    eval_every: int = 10
    adam: AdamConfig = field(default_factory=AdamConfig)
    schedule: Optional[ScheduleConfig] = None
    warmup_ratio: float = 0.1
    schedule_kind: str = ScheduleKind.WARMUP_LINEAR.value
    dropout: Optional[float] = None
    dataset: str = "bench"
    init_checkpoint: str = ""
    train_subset: Optional[int] = None
    subset_seed: int = 0
    grad_norm_granularity: str = "layer"
    mask_rate: float = 0.15
    held_out_fraction: float = 0.1

    def __post_init__(self) -> None:
        if (self.epochs is None) == (self.total_iterations is None):
            raise StabilityValidationError("exactly one of epochs and total_iterations must be set")
        if self.epochs is not None:
            ensure_count("epochs", self.epochs)
        if self.total_iterations is not None:
            ensure_count("total_iterations", self.total_iterations)
        ensure_count("batch_size", self.batch_size)
        ensure_count("eval_every", self.eval_every)
        if self.dropout is not None:
            ensure_probability("dropout", self.dropout)
        if self.train_subset is not None:
            ensure_count("train_subset", self.train_subset)
        if self.grad_norm_granularity not in ("layer", "matrix"):
            raise StabilityValidationError(
                f"grad_norm_granularity must be 'layer' or 'matrix', got {self.grad_norm_granularity!r}"
            )
        if not 0.0 < self.mask_rate < 1.0:
            raise StabilityValidationError(f"mask_rate must lie in (0, 1), got {self.mask_rate}")
        ensure_probability("held_out_fraction", self.held_out_fraction)

    def iterations_per_epoch(self, train_size: int) -> int:
        return -(-train_size // self.batch_size)

    def total_steps(self, train_size: int) -> int:
        if self.total_iterations is not None:
            return self.total_iterations
        return self.iterations_per_epoch(train_size) * self.epochs

    def resolve_schedule(self, train_size: int) -> ScheduleConfig:
        total = self.total_steps(train_size)
        if self.schedule is not None:
            if self.schedule.total_steps != total:
                raise StabilityValidationError(
                    f"schedule covers {self.schedule.total_steps} steps but the run has {total}"
                )
            return self.schedule
        return ScheduleConfig(
            total_steps=total,
            warmup_ratio=self.warmup_ratio,
            base_lr=self.adam.alpha,
            kind=self.schedule_kind,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["adam"] = self.adam.to_dict()
        data["schedule"] = self.schedule.to_dict() if self.schedule else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        if "adam" in data:
            data["adam"] = AdamConfig.from_dict(data["adam"])
        if data.get("schedule") is not None:
            data["schedule"] = ScheduleConfig.from_dict(data["schedule"])
        return cls(**data)

    def with_overrides(self, overrides: Dict[str, Any]) -> "RunConfig":
        """
        Apply dotted-path overrides (``adam.alpha``, ``epochs`` ...).

        Setting ``epochs`` clears ``total_iterations`` and vice versa so the
        exactly-one rule keeps holding.
        """
        data = self.to_dict()
        for path, value in overrides.items():
            set_dotted(data, path, value)
            if path == "epochs" and value is not None:
                data["total_iterations"] = None
            elif path == "total_iterations" and value is not None:
                data["epochs"] = None
        return RunConfig.from_dict(data)


@dataclass
class EvalPoint:
    """One dev evaluation: iteration, dev metric, mean train loss since the last eval (None at 0)."""
    iteration: int
    dev_metric: float
    train_loss: Optional[float]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class RunRecord:
    """
    Full trace of one training run.

    Per-iteration series (losses, lrs, bias_correction_factors and every
    gradient-norm group) have one entry per completed iteration.
    ``wall_time`` is informational and is never serialized or compared.
    """
    run_id: str
    kind: str
    config: Dict[str, Any]
    metric: str
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    bias_correction_factors: List[float] = field(default_factory=list)
    grad_norms: Dict[str, List[float]] = field(default_factory=dict)
    evals: List[EvalPoint] = field(default_factory=list)
    final_metric: float = float("nan")
    final_train_loss: float = float("nan")
    baseline: Optional[float] = None
    failed: bool = False
    failure_reason: str = ""
    planned_iterations: int = 0
    dev_correct: List[bool] = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)

    @property
    def iterations(self) -> int:
        return len(self.losses)

    @property
    def diverged(self) -> bool:
        return self.failure_reason == "divergence"

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "kind": self.kind,
            "config": copy.deepcopy(self.config),
            "metric": self.metric,
            "losses": list(self.losses),
            "lrs": list(self.lrs),
            "bias_correction_factors": list(self.bias_correction_factors),
            "grad_norms": {k: list(v) for k, v in self.grad_norms.items()},
            "evals": [e.to_dict() for e in self.evals],
            "final_metric": self.final_metric,
            "final_train_loss": self.final_train_loss,
            "baseline": self.baseline,
            "failed": self.failed,
            "failure_reason": self.failure_reason,
            "planned_iterations": self.planned_iterations,
            "dev_correct": [bool(c) for c in self.dev_correct],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(
            run_id=data["run_id"],
            kind=data["kind"],
            config=data["config"],
            metric=data["metric"],
            losses=list(data.get("losses", [])),
            lrs=list(data.get("lrs", [])),
            bias_correction_factors=list(data.get("bias_correction_factors", [])),
            grad_norms={k: list(v) for k, v in data.get("grad_norms", {}).items()},
            evals=[EvalPoint(**e) for e in data.get("evals", [])],
            final_metric=data.get("final_metric", float("nan")),
            final_train_loss=data.get("final_train_loss", float("nan")),
            baseline=data.get("baseline"),
            failed=bool(data.get("failed", False)),
            failure_reason=data.get("failure_reason", ""),
            planned_iterations=int(data.get("planned_iterations", 0)),
            dev_correct=[bool(c) for c in data.get("dev_correct", [])],
        )


def get_dotted(data: Dict[str, Any], path: str) -> Any:
    node: Any = data
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            raise KeyError(path)
        node = node[part]
    return node


def set_dotted(data: Dict[str, Any], path: str, value: Any) -> None:
    """Set a leaf by dotted path; every intermediate key must already exist."""
    parts = path.split(".")
    node: Any = data
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise StabilityValidationError(f"unknown config path: {path}")
        if node[part] is None:
            node[part] = {}
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise StabilityValidationError(f"unknown config path: {path}")
    node[parts[-1]] = value


def flatten_dict(data: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Flatten nested dicts to dotted keys; lists and scalars are leaves."""
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict) and value:
            flat.update(flatten_dict(value, path + "."))
        else:
            flat[path] = value
    return flat
