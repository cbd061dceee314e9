"""
ADAM with decoupled weight decay, explicit bias-correction control,
learning-rate schedules and global gradient clipping.

The update follows the step-size form of bias correction: moments are
never rescaled; instead the scheduled learning rate is multiplied by
sqrt(1 - beta2^t) / (1 - beta1^t) when correction is enabled, and
epsilon is added after the square root of the uncorrected second moment.
All functions are pure: they return new ParamStores and states.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from .params import ParamStore, global_norm
from .types import AdamConfig, AdamState, ScheduleConfig, ScheduleKind
from .validate import NonFiniteError, StabilityValidationError

PRESETS_PATH = Path(__file__).resolve().parent.parent / "presets.json"


def load_presets() -> Dict[str, Any]:
    """Load the bundled presets document (optimizers, datasets, plans)."""
    with open(PRESETS_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def bias_correction_factor(t: int, beta1: float, beta2: float) -> float:
    """
    Step-size multiplier sqrt(1 - beta2^t) / (1 - beta1^t).

    Raises:
        StabilityValidationError: If t < 1
    """
    if t < 1:
        raise StabilityValidationError(f"bias_correction_factor: step must be >= 1, got {t}")
    return math.sqrt(1.0 - beta2 ** t) / (1.0 - beta1 ** t)


@dataclass
class AdamStep:
    """Result of one optimizer update."""
    params: ParamStore
    state: AdamState
    lr: float
    factor: float


def adam_update(params: ParamStore, grads: ParamStore, state: AdamState,
                config: AdamConfig, scheduled_lr: float) -> AdamStep:
    """
    One ADAM update with decoupled weight decay.

    m <- b1*m + (1-b1)*g;  v <- b2*v + (1-b2)*g^2
    theta <- theta - lr_t * m / (sqrt(v) + eps) - lr * lambda * theta

    where lr_t = lr * bias_correction_factor(t) when correction is on and
    lr otherwise. Names matching ``config.decay_exempt`` skip the decay
    term. Arithmetic is carried in float64; parameters are cast back to
    their own dtype.

    Raises:
        StabilityValidationError: Shape/name mismatch or negative lr
        NonFiniteError: Non-finite gradient (no state is changed)
    """
    if scheduled_lr < 0:
        raise StabilityValidationError(f"scheduled_lr must be >= 0, got {scheduled_lr}")
    if grads.names() != params.names() or state.m.names() != params.names():
        raise StabilityValidationError("adam_update: gradient/state names do not match parameters")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise StabilityValidationError(
                f"adam_update: gradient shape {g.shape} != parameter shape {params[name].shape} for {name}"
            )
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_update: non-finite gradient for {name}", where=name)

    t = state.step + 1
    factor = bias_correction_factor(t, config.beta1, config.beta2) if config.bias_correction else 1.0
    step_lr = scheduled_lr * factor
    decay = scheduled_lr * config.weight_decay_lambda

    new_params, new_m, new_v = ParamStore(), ParamStore(), ParamStore()
    for name, theta in params.items():
        g = grads[name].astype(np.float64)
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        denom = np.sqrt(v) + config.epsilon
        direction = np.divide(m, denom, out=np.zeros_like(m), where=denom != 0)
        theta64 = theta.astype(np.float64)
        updated = theta64 - step_lr * direction
        if decay and config.decays(name):
            updated = updated - decay * theta64
        new_params.add(name, updated.astype(theta.dtype))
        new_m.add(name, m)
        new_v.add(name, v)

    return AdamStep(
        params=new_params,
        state=AdamState(step=t, m=new_m, v=new_v),
        lr=scheduled_lr,
        factor=factor,
    )


def warmup_linear_lr(t: int, schedule: ScheduleConfig) -> float:
    """
    Linear warmup from 0 to base_lr over W steps, then linear decay to 0 at T.

    With W = 0 the schedule is a pure linear decay starting from base_lr.

    Raises:
        StabilityValidationError: If t lies outside [0, T]
    """
    total, warmup = schedule.total_steps, schedule.warmup_steps
    if not 0 <= t <= total:
        raise StabilityValidationError(f"schedule step {t} outside [0, {total}]")
    if warmup > 0 and t <= warmup:
        return schedule.base_lr * t / warmup
    return schedule.base_lr * (total - t) / (total - warmup)


def learning_rate(t: int, schedule: ScheduleConfig) -> float:
    """Scheduled learning rate for step t under either schedule kind."""
    if schedule.kind == ScheduleKind.CONSTANT.value:
        if not 0 <= t <= schedule.total_steps:
            raise StabilityValidationError(f"schedule step {t} outside [0, {schedule.total_steps}]")
        return schedule.base_lr
    return warmup_linear_lr(t, schedule)


def clip_global_norm(grads: ParamStore, max_norm: float) -> Tuple[ParamStore, float]:
    """
    Scale all gradients jointly when their global L2 norm exceeds max_norm.

    Every gradient is multiplied by max_norm / norm in float64, so the
    clipped global norm equals max_norm up to rounding.

    Returns:
        (possibly scaled gradients, pre-clip global norm)

    Raises:
        StabilityValidationError: If max_norm <= 0
        NonFiniteError: If the norm is not finite
    """
    if not max_norm > 0:
        raise StabilityValidationError(f"max_norm must be > 0, got {max_norm}")
    norm = global_norm(grads.values())
    if not math.isfinite(norm):
        raise NonFiniteError("clip_global_norm: non-finite gradient norm", where="clip")
    if norm <= max_norm:
        return grads, norm
    coef = max_norm / norm
    return grads.map(lambda name, g: (g.astype(np.float64) * coef).astype(g.dtype)), norm


def preset(name: str) -> Tuple[AdamConfig, Dict[str, Any]]:
    """
    Optimizer preset by model family.

    Returns:
        (AdamConfig with bias_correction False, notes such as dropout and
        the recommended learning-rate range)

    Raises:
        StabilityValidationError: Unknown preset name
    """
    presets = load_presets()["optimizers"]
    if name not in presets:
        raise StabilityValidationError(f"unknown optimizer preset {name!r}; known: {sorted(presets)}")
    entry = presets[name]
    return AdamConfig.from_dict(entry["adam"]), dict(entry["notes"])
