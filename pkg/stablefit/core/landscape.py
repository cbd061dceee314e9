"""
Two-dimensional loss and gradient-norm surfaces.

The plane is spanned by d1 = theta_f - theta_p (towards a failed run) and
d2 = theta_s - theta_p (towards a successful run); a grid point (a, b) is
theta_p + (a * d1 + b * d2), combined in float64 and cast back to the
model dtype. Evaluation uses one fixed batch with dropout off. The corners
(0, 0), (1, 0) and (0, 1) are also evaluated directly on the three
checkpoints, independent of grid alignment.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np

from . import plots
from .autodiff import no_grad, value_and_grad
from .data import TaskDataset
from .ids import array_hash
from .model import ClassifyBatch, expected_param_shapes, forward_classify, init_params
from .params import ParamStore, global_norm
from .rng import RngStream
from .serialize import write_csv
from .types import Checkpoint, Mode, ModelConfig
from .validate import (
    NonFiniteError,
    StabilityValidationError,
    ensure_checkpoint,
    ensure_count,
    ensure_same_architecture,
)

logger = logging.getLogger(__name__)

QUANTITIES = ("loss", "gradient-norm")
CORNERS = {"0,0": (0.0, 0.0), "1,0": (1.0, 0.0), "0,1": (0.0, 1.0)}
SNAP_TOLERANCE = 1e-12

ScalarFn = Callable[[ParamStore], float]


@dataclass
class SurfaceSpec:
    """
    What to evaluate and where.

    Attributes:
        pretrained: theta_p; only its encoder is used
        failed: theta_f, a fine-tuned checkpoint with the classifier head
        successful: theta_s, same architecture and classifier as theta_f
        a_range, b_range: Inclusive axis ranges
        resolution: Points per axis (>= 2), uniformly spaced, endpoints included
        batch_size: Training examples in the fixed evaluation batch
        quantity: "loss" or "gradient-norm"
        head_seed: Seed of the classifier head standing in for theta_p's
        workers: Threads evaluating grid rows
    """
    pretrained: Optional[Checkpoint] = field(default=None, compare=False)
    failed: Optional[Checkpoint] = field(default=None, compare=False)
    successful: Optional[Checkpoint] = field(default=None, compare=False)
    a_range: Tuple[float, float] = (-1.5, 1.5)
    b_range: Tuple[float, float] = (-1.5, 1.5)
    resolution: int = 40
    batch_size: int = 128
    quantity: str = "loss"
    head_seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        ensure_count("resolution", self.resolution, minimum=2)
        ensure_count("batch_size", self.batch_size)
        ensure_count("workers", self.workers)
        if self.quantity not in QUANTITIES:
            raise StabilityValidationError(f"quantity must be one of {QUANTITIES}, got {self.quantity!r}")
        for name, (lo, hi) in (("a_range", self.a_range), ("b_range", self.b_range)):
            if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
                raise StabilityValidationError(f"{name} must be a finite increasing pair, got {(lo, hi)}")

    def axis(self, bounds: Tuple[float, float]) -> np.ndarray:
        values = np.linspace(bounds[0], bounds[1], self.resolution)
        for exact in (0.0, 1.0):
            values[np.abs(values - exact) <= SNAP_TOLERANCE] = exact
        return values

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "a_range": list(self.a_range),
            "b_range": list(self.b_range),
            "resolution": self.resolution,
            "batch_size": self.batch_size,
            "quantity": self.quantity,
            "head_seed": self.head_seed,
        }
        for role in ("pretrained", "failed", "successful"):
            checkpoint = getattr(self, role)
            data[role] = checkpoint.hash() if checkpoint is not None else None
        return data


@dataclass
class SurfaceGrid:
    """values[i, j] is the quantity at (a_values[i], b_values[j]); non-finite entries are NaN and listed in flagged."""
    a_values: np.ndarray
    b_values: np.ndarray
    values: np.ndarray
    quantity: str
    corners: Dict[str, float]
    flagged: List[Tuple[int, int]] = field(default_factory=list)
    spec: Dict[str, Any] = field(default_factory=dict)
    batch: str = ""

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    def to_dict(self) -> Dict[str, Any]:
        return {
            "quantity": self.quantity,
            "a_values": [float(a) for a in self.a_values],
            "b_values": [float(b) for b in self.b_values],
            "values": [[None if math.isnan(v) else float(v) for v in row] for row in self.values],
            "corners": dict(self.corners),
            "flagged": [list(p) for p in self.flagged],
            "spec": self.spec,
            "batch": self.batch,
        }


def surface_batch(train: TaskDataset, size: int, seed: int = 0) -> ClassifyBatch:
    """Fixed evaluation batch: ``size`` training examples drawn without replacement, in index order."""
    ensure_count("size", size)
    size = min(size, len(train))
    index = np.sort(RngStream(seed).split("sampling", "surface").generator.choice(len(train), size, replace=False))
    return train.batch(index)


def batch_hash(batch: ClassifyBatch) -> str:
    return array_hash({"tokens": np.asarray(batch.tokens), "labels": np.asarray(batch.labels)})


def plane_point(origin: ParamStore, d1: Dict[str, np.ndarray], d2: Dict[str, np.ndarray],
                a: float, b: float) -> ParamStore:
    return ParamStore(
        (name, (origin[name].astype(np.float64) + (a * d1[name] + b * d2[name])).astype(origin[name].dtype))
        for name in origin
    )


def scalar_surface(origin: ParamStore, towards_a: ParamStore, towards_b: ParamStore, fn: ScalarFn,
                   a_values: np.ndarray, b_values: np.ndarray,
                   workers: int = 1) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
    """
    Evaluate ``fn`` over the plane through three parameter sets.

    Returns:
        (values matrix, flagged indices); entries where ``fn`` is non-finite
        or raises NonFiniteError are NaN and flagged
    """
    if set(origin) != set(towards_a) or set(origin) != set(towards_b):
        raise StabilityValidationError("scalar_surface: parameter sets differ in names")
    d1 = {n: towards_a[n].astype(np.float64) - origin[n].astype(np.float64) for n in origin}
    d2 = {n: towards_b[n].astype(np.float64) - origin[n].astype(np.float64) for n in origin}

    def row(i: int) -> Tuple[List[float], List[int]]:
        entries, bad = [], []
        for j, b in enumerate(b_values):
            try:
                value = float(fn(plane_point(origin, d1, d2, float(a_values[i]), float(b))))
            except NonFiniteError:
                value = math.nan
            if not math.isfinite(value):
                value = math.nan
                bad.append(j)
            entries.append(value)
        return entries, bad

    values = np.empty((len(a_values), len(b_values)), dtype=np.float64)
    flagged: List[Tuple[int, int]] = []
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for i, (entries, bad) in enumerate(pool.map(row, range(len(a_values)))):
            values[i] = entries
            flagged.extend((i, j) for j in bad)
    if flagged:
        logger.warning("surface has %d non-finite entries", len(flagged))
    return values, flagged


def surface_endpoints(spec: SurfaceSpec) -> Tuple[ModelConfig, ParamStore, ParamStore, ParamStore]:
    """
    Classification parameter sets for theta_p, theta_f and theta_s.

    theta_p takes its encoder from the pre-trained checkpoint and its
    classifier head from a ``head_seed`` initialization.
    """
    for role in ("pretrained", "failed", "successful"):
        checkpoint = getattr(spec, role)
        if checkpoint is None:
            raise StabilityValidationError(f"surface needs the {role} checkpoint")
        ensure_checkpoint(checkpoint, "surface")
    ensure_same_architecture(spec.failed, spec.successful, "surface")
    ensure_same_architecture(spec.pretrained, spec.failed, "surface")
    config = spec.failed.config
    if "classifier" not in config.heads or spec.successful.config != config:
        raise StabilityValidationError("surface: failed and successful checkpoints need the same classifier config")

    names = list(expected_param_shapes(config))
    head = init_params(config, spec.head_seed, heads=("classifier",))
    origin = ParamStore(
        (n, (head[n] if n in head else spec.pretrained.params[n]).astype(config.np_dtype)) for n in names
    )
    failed = ParamStore((n, spec.failed.params[n]) for n in names)
    successful = ParamStore((n, spec.successful.params[n]) for n in names)
    return config, origin, failed, successful


def _quantity_fn(config: ModelConfig, batch: ClassifyBatch, quantity: str) -> ScalarFn:
    if quantity == "loss":
        def loss(params: ParamStore) -> float:
            with no_grad():
                return float(forward_classify(params, config, batch, Mode.EVAL).loss.data)
        return loss

    def grad_norm(params: ParamStore) -> float:
        _, grads = value_and_grad(lambda p: forward_classify(p, config, batch, Mode.EVAL).loss, params)
        return global_norm(grads.values())
    return grad_norm


def _surface(spec: SurfaceSpec, batch: ClassifyBatch, quantity: str) -> SurfaceGrid:
    config, origin, failed, successful = surface_endpoints(spec)
    fn = _quantity_fn(config, batch, quantity)
    a_values, b_values = spec.axis(spec.a_range), spec.axis(spec.b_range)
    logger.info("%s surface: %d x %d points", quantity, len(a_values), len(b_values))
    values, flagged = scalar_surface(origin, failed, successful, fn, a_values, b_values, spec.workers)
    endpoints = {"0,0": origin, "1,0": failed, "0,1": successful}
    corners = {key: fn(endpoints[key]) for key in CORNERS}
    echo = spec.to_dict()
    echo["quantity"] = quantity
    return SurfaceGrid(a_values, b_values, values, quantity, corners, flagged, echo, batch_hash(batch))


def loss_surface(spec: SurfaceSpec, batch: ClassifyBatch) -> SurfaceGrid:
    """Eval-mode classification loss over the plane, all parameters included."""
    return _surface(spec, batch, "loss")


def gradient_norm_surface(spec: SurfaceSpec, batch: ClassifyBatch) -> SurfaceGrid:
    """Global L2 norm of the full parameter gradient over the plane."""
    return _surface(spec, batch, "gradient-norm")


def write_surface(grid: SurfaceGrid, out_dir: Union[str, Path]) -> List[str]:
    """Grid CSV (header ``a\\b``, b values; then one row per a), SVG contour and JSON."""
    out_dir = Path(out_dir)
    slug = grid.quantity.replace("-", "_")
    csv_name, svg_name = f"surface_{slug}.csv", f"surface_{slug}.svg"
    write_csv(out_dir / csv_name, ["a\\b"] + [float(b) for b in grid.b_values],
              ([float(a)] + [None if math.isnan(v) else float(v) for v in row]
               for a, row in zip(grid.a_values, grid.values)))
    plots.contour_svg(out_dir / svg_name, grid.a_values, grid.b_values, grid.values,
                      title=grid.quantity, markers={"p": (0.0, 0.0), "f": (1.0, 0.0), "s": (0.0, 1.0)})
    return [csv_name, svg_name]
