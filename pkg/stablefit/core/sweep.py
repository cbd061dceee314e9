"""
Multi-seed, multi-config fine-tuning sweeps.

A SweepPlan expands to cells (Cartesian axes and/or explicit override
dicts) and every cell runs once per seed. Runs are independent and may
execute in worker processes; results are merged by (cell, seed) so the
SweepResult does not depend on execution order or worker count.
"""

import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import plots
from .data import TaskDataset
from .forgetting import failure_signature
from .ids import cell_id
from .metrics import (
    LeveneResult,
    levene_test,
    per_point_stability,
    performance_variance_stability,
    summary_stats,
)
from .optim import load_presets
from .serialize import load_checkpoint, save_json, write_csv
from .training import run_finetune
from .types import Checkpoint, RunConfig, RunRecord
from .validate import ConfigError, StabilityValidationError, ensure_count, ensure_distinct

logger = logging.getLogger(__name__)

DEFAULT_SEEDS = tuple(range(25))
DOWNSAMPLE_PLAN = "downsample-matched"


@dataclass
class SweepPlan:
    """
    Cells x seeds of fine-tuning runs.

    Attributes:
        base: RunConfig every cell starts from
        axes: (dotted path, values) pairs expanded as a Cartesian product
        cells: Explicit override dicts, placed before the Cartesian cells
        seeds: Run seeds, shared by every cell
        name: Plan label echoed into reports
        dataset: Dataset reference (profile name)
        init_checkpoint: Path of the encoder checkpoint, if not passed in memory
        comparisons: Cell index pairs for pairwise Levene tests; None means all pairs
        lr_scale: Multiplier applied to adam.alpha of every cell
    """
    base: RunConfig = field(default_factory=RunConfig)
    axes: List[Tuple[str, List[Any]]] = field(default_factory=list)
    cells: List[Dict[str, Any]] = field(default_factory=list)
    seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    name: str = "custom"
    dataset: str = "bench"
    init_checkpoint: str = ""
    comparisons: Optional[List[Tuple[int, int]]] = None
    lr_scale: float = 1.0

    def __post_init__(self) -> None:
        if not self.seeds:
            raise StabilityValidationError("a sweep needs at least one seed")
        ensure_distinct("seeds", self.seeds)
        for path, values in self.axes:
            if not values:
                raise StabilityValidationError(f"sweep axis {path!r} has no values")
        if not self.lr_scale > 0:
            raise StabilityValidationError(f"lr_scale must be > 0, got {self.lr_scale}")

    def cell_overrides(self) -> List[Dict[str, Any]]:
        overrides = [dict(c) for c in self.cells]
        if self.axes:
            paths = [path for path, _ in self.axes]
            for combo in itertools.product(*(values for _, values in self.axes)):
                overrides.append(dict(zip(paths, combo)))
        return overrides or [{}]

    def cell_configs(self) -> List[Tuple[str, Dict[str, Any], RunConfig]]:
        """(cell id, overrides, resolved RunConfig) in plan order."""
        result = []
        for index, overrides in enumerate(self.cell_overrides()):
            config = self.base.with_overrides(overrides)
            label = overrides
            if self.lr_scale != 1.0:
                config = config.with_overrides({"adam.alpha": config.adam.alpha * self.lr_scale})
                # ids carry the rate the runs actually use
                label = {**overrides, "adam.alpha": config.adam.alpha}
            result.append((cell_id(index, label), overrides, config))
        return result

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "base": self.base.to_dict(),
            "axes": [[path, list(values)] for path, values in self.axes],
            "cells": [dict(c) for c in self.cells],
            "seeds": list(self.seeds),
            "dataset": self.dataset,
            "init_checkpoint": self.init_checkpoint,
            "comparisons": [list(p) for p in self.comparisons] if self.comparisons is not None else None,
            "lr_scale": self.lr_scale,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepPlan":
        comparisons = data.get("comparisons")
        return cls(
            base=RunConfig.from_dict(data.get("base", {})),
            axes=[(path, list(values)) for path, values in data.get("axes", [])],
            cells=[dict(c) for c in data.get("cells", [])],
            seeds=list(data.get("seeds", DEFAULT_SEEDS)),
            name=data.get("name", "custom"),
            dataset=data.get("dataset", "bench"),
            init_checkpoint=data.get("init_checkpoint", ""),
            comparisons=[tuple(p) for p in comparisons] if comparisons is not None else None,
            lr_scale=float(data.get("lr_scale", 1.0)),
        )


@dataclass
class CellSummary:
    """Per-cell statistics; std, s_variance and s_per_point need at least two runs."""
    n: int
    std: Optional[float]
    mean: float
    max: float
    failed_count: int
    diverged_count: int
    s_variance: Optional[float] = None
    s_per_point: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CellSummary":
        return cls(**data)


@dataclass
class CellResult:
    cell_id: str
    overrides: Dict[str, Any]
    records: List[RunRecord]
    summary: CellSummary

    @property
    def metrics(self) -> List[float]:
        return [r.final_metric for r in self.records]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cell_id": self.cell_id,
            "overrides": dict(self.overrides),
            "summary": self.summary.to_dict(),
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CellResult":
        return cls(
            cell_id=data["cell_id"],
            overrides=dict(data["overrides"]),
            records=[RunRecord.from_dict(r) for r in data["records"]],
            summary=CellSummary.from_dict(data["summary"]),
        )


@dataclass
class PairComparison:
    cell_a: str
    cell_b: str
    statistic: float
    pvalue: float
    significant: bool

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_levene(cls, cell_a: str, cell_b: str, result: LeveneResult) -> "PairComparison":
        return cls(cell_a, cell_b, result.statistic, result.pvalue, result.significant)


@dataclass
class SweepResult:
    plan: Dict[str, Any]
    cells: List[CellResult]
    comparisons: List[PairComparison] = field(default_factory=list)
    runner_up: Optional[PairComparison] = None
    num_classes: int = 2

    @property
    def records(self) -> List[RunRecord]:
        return [r for cell in self.cells for r in cell.records]

    def cell(self, cell_ref: str) -> CellResult:
        for cell in self.cells:
            if cell.cell_id == cell_ref:
                return cell
        raise StabilityValidationError(f"unknown cell {cell_ref!r}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "plan": self.plan,
            "num_classes": self.num_classes,
            "cells": [c.to_dict() for c in self.cells],
            "comparisons": [c.to_dict() for c in self.comparisons],
            "runner_up": self.runner_up.to_dict() if self.runner_up else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SweepResult":
        runner_up = data.get("runner_up")
        return cls(
            plan=data["plan"],
            cells=[CellResult.from_dict(c) for c in data["cells"]],
            comparisons=[PairComparison(**c) for c in data.get("comparisons", [])],
            runner_up=PairComparison(**runner_up) if runner_up else None,
            num_classes=int(data.get("num_classes", 2)),
        )


# ---------------------------------------------------------------------------
# Plans
# ---------------------------------------------------------------------------

def iterations_matched_epochs(full_train_size: int, full_epochs: int, batch_size: int, subset_size: int) -> int:
    """
    Epochs a subset needs to train for at least as many iterations as the full run.

    Raises:
        StabilityValidationError: Non-positive counts or subset larger than the full set
    """
    for name, value in (("full_train_size", full_train_size), ("full_epochs", full_epochs),
                        ("batch_size", batch_size), ("subset_size", subset_size)):
        ensure_count(name, value)
    if subset_size > full_train_size:
        raise StabilityValidationError(f"subset_size {subset_size} exceeds full_train_size {full_train_size}")
    full_iters = -(-full_train_size // batch_size) * full_epochs
    subset_per_epoch = -(-subset_size // batch_size)
    return -(-full_iters // subset_per_epoch)


def downsampling_plan(base: RunConfig, full_train_size: int, subset_size: int,
                      seeds: Sequence[int] = DEFAULT_SEEDS, lr_scale: float = 1.0) -> SweepPlan:
    """Full data, subset at base epochs, and subset at iteration-matched epochs."""
    if base.epochs is None:
        raise ConfigError("the downsampling protocol needs an epoch-based base config",
                          path="run.epochs", expected="int")
    matched = iterations_matched_epochs(full_train_size, base.epochs, base.batch_size, subset_size)
    return SweepPlan(
        base=base,
        cells=[{}, {"train_subset": subset_size}, {"train_subset": subset_size, "epochs": matched}],
        seeds=list(seeds),
        name=DOWNSAMPLE_PLAN,
        lr_scale=lr_scale,
    )


def bundled_plan(name: str, base: Optional[RunConfig] = None, seeds: Sequence[int] = DEFAULT_SEEDS,
                 lr_scale: float = 1.0, full_train_size: Optional[int] = None,
                 subset_size: Optional[int] = None) -> SweepPlan:
    """
    Build one of the plans shipped in presets.json (or the downsampling protocol).

    Raises:
        StabilityValidationError: Unknown plan name
    """
    base = base or RunConfig()
    if name == DOWNSAMPLE_PLAN:
        if full_train_size is None or subset_size is None:
            raise ConfigError(f"{DOWNSAMPLE_PLAN} needs a subset size", path="sweep.subset_size", expected="int")
        return downsampling_plan(base, full_train_size, subset_size, seeds, lr_scale)
    plans = load_presets()["plans"]
    if name not in plans:
        raise StabilityValidationError(f"unknown sweep plan {name!r}; known: {sorted(plans) + [DOWNSAMPLE_PLAN]}")
    entry = plans[name]
    return SweepPlan(
        base=base.with_overrides(entry.get("base", {})),
        axes=[(path, list(values)) for path, values in entry.get("axes", [])],
        cells=[dict(c) for c in entry.get("cells", [])],
        seeds=list(seeds),
        name=name,
        lr_scale=lr_scale,
    )


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------

_WORKER_DATA: Dict[str, Any] = {}


def _init_worker(train: TaskDataset, dev: TaskDataset, init: Checkpoint) -> None:
    _WORKER_DATA.update(train=train, dev=dev, init=init)


def _run_task(task: Tuple[int, int, Dict[str, Any]]) -> Tuple[int, int, RunRecord]:
    cell_index, seed_index, config = task
    record, _ = run_finetune(RunConfig.from_dict(config), _WORKER_DATA["train"], _WORKER_DATA["dev"],
                             _WORKER_DATA["init"])
    return cell_index, seed_index, record


def compare_stability(cell_a: Sequence[float], cell_b: Sequence[float]) -> LeveneResult:
    """
    Levene test between two cells' final metrics; ``significant`` means p < 0.001.

    Raises:
        StabilityValidationError: Either cell has fewer than two runs
    """
    return levene_test([cell_a, cell_b])


def summarize_cell(records: Sequence[RunRecord]) -> CellSummary:
    stats = summary_stats([r.final_metric for r in records])
    s_variance = performance_variance_stability([r.final_metric for r in records]) if stats.n >= 2 else None
    s_per_point = None
    lengths = {len(r.dev_correct) for r in records}
    if stats.n >= 2 and len(lengths) == 1 and 0 not in lengths:
        s_per_point = per_point_stability([r.dev_correct for r in records])
    return CellSummary(
        n=stats.n,
        std=stats.std,
        mean=stats.mean,
        max=stats.max,
        failed_count=sum(1 for r in records if r.failed),
        diverged_count=sum(1 for r in records if r.diverged),
        s_variance=s_variance,
        s_per_point=s_per_point,
    )


def runner_up_comparison(cells: Sequence[CellResult]) -> Optional[PairComparison]:
    """Levene test between the cell with the smallest std and the one with the second smallest."""
    ranked = sorted((c.summary.std, i) for i, c in enumerate(cells) if c.summary.std is not None)
    if len(ranked) < 2:
        return None
    best, second = cells[ranked[0][1]], cells[ranked[1][1]]
    return PairComparison.from_levene(best.cell_id, second.cell_id, compare_stability(best.metrics, second.metrics))


def run_sweep(plan: SweepPlan, train: TaskDataset, dev: TaskDataset,
              init: Union[Checkpoint, str, Path, None] = None, workers: int = 1) -> SweepResult:
    """
    Run every (cell, seed) of a plan and summarize the cells.

    Args:
        plan: The sweep plan
        train: Training split shared by all runs
        dev: Dev split shared by all runs
        init: Encoder checkpoint, or a path to one; defaults to plan.init_checkpoint
        workers: Worker processes; 1 runs inline

    Returns:
        SweepResult with cells in plan order and records in seed order

    Raises:
        ArtifactMissingError: The init checkpoint path does not exist
    """
    ensure_count("workers", workers)
    if init is None:
        if not plan.init_checkpoint:
            raise StabilityValidationError("run_sweep needs an init checkpoint")
        init = plan.init_checkpoint
    if not isinstance(init, Checkpoint):
        init, _ = load_checkpoint(init)

    cells = plan.cell_configs()
    tasks = []
    for ci, (_, _, config) in enumerate(cells):
        for si, seed in enumerate(plan.seeds):
            tasks.append((ci, si, config.with_overrides({"seed": seed}).to_dict()))
    logger.info("sweep %s: %d cells x %d seeds on %d worker(s)", plan.name, len(cells), len(plan.seeds), workers)

    results: Dict[Tuple[int, int], RunRecord] = {}
    if workers == 1:
        _init_worker(train, dev, init)
        try:
            for task in tasks:
                ci, si, record = _run_task(task)
                results[(ci, si)] = record
        finally:
            _WORKER_DATA.clear()
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(train, dev, init)) as pool:
            for ci, si, record in pool.map(_run_task, tasks):
                results[(ci, si)] = record

    cell_results = []
    for ci, (cid, overrides, _) in enumerate(cells):
        records = [results[(ci, si)] for si in range(len(plan.seeds))]
        summary = summarize_cell(records)
        cell_results.append(CellResult(cid, overrides, records, summary))
        logger.info("cell %s: mean=%.4f std=%s failed=%d/%d", cid, summary.mean,
                    "n/a" if summary.std is None else f"{summary.std:.4f}", summary.failed_count, summary.n)

    comparisons = []
    if len(plan.seeds) >= 2:
        pairs = plan.comparisons
        if pairs is None:
            pairs = list(itertools.combinations(range(len(cell_results)), 2))
        for a, b in pairs:
            if not (0 <= a < len(cell_results) and 0 <= b < len(cell_results)):
                raise StabilityValidationError(f"comparison ({a}, {b}) references a missing cell")
            ca, cb = cell_results[a], cell_results[b]
            comparisons.append(PairComparison.from_levene(ca.cell_id, cb.cell_id,
                                                          compare_stability(ca.metrics, cb.metrics)))

    return SweepResult(
        plan=plan.to_dict(),
        cells=cell_results,
        comparisons=comparisons,
        runner_up=runner_up_comparison(cell_results),
        num_classes=train.num_classes,
    )


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class CurveBand:
    iterations: List[int]
    mean: List[float]
    std: List[float]
    count: List[int]


def curve_band(records: Sequence[RunRecord], trace: str = "train_loss") -> CurveBand:
    """
    Per-iteration mean and population std over runs.

    ``train_loss`` uses the per-iteration losses; ``dev_metric`` uses the
    evaluation points. Runs that stopped early only contribute to the
    iterations they reached.
    """
    values: Dict[int, List[float]] = {}
    for record in records:
        if trace == "train_loss":
            points = enumerate(record.losses, start=1)
        elif trace == "dev_metric":
            points = ((e.iteration, e.dev_metric) for e in record.evals)
        else:
            raise StabilityValidationError(f"unknown trace {trace!r}")
        for iteration, value in points:
            values.setdefault(iteration, []).append(value)
    iterations = sorted(values)
    arrays = [np.asarray(values[i], dtype=np.float64) for i in iterations]
    return CurveBand(
        iterations=iterations,
        mean=[float(a.mean()) for a in arrays],
        std=[float(a.std()) for a in arrays],
        count=[int(a.size) for a in arrays],
    )


def signature_table(result: SweepResult, tolerance: float = 0.05) -> List[Dict[str, Any]]:
    rows = []
    for cell in result.cells:
        for record in cell.records:
            sig = failure_signature(record, result.num_classes, tolerance)
            rows.append({"cell_id": cell.cell_id, "seed": record.seed, **sig.to_dict()})
    return rows


def groups_by_axis(result: SweepResult, path: str) -> Dict[str, List[str]]:
    """Group cell ids by their value on one override path (cells without it are skipped)."""
    groups: Dict[str, List[str]] = {}
    for cell in result.cells:
        if path in cell.overrides:
            key = f"{path.split('.')[-1]}={cell.overrides[path]}"
            groups.setdefault(key, []).append(cell.cell_id)
    return groups


def _slug(text: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in text)


def emit_report(result: SweepResult, out_dir: Union[str, Path],
                groups: Optional[Dict[str, List[str]]] = None) -> List[str]:
    """
    Write summary tables, plot data and SVG plots for a sweep.

    Args:
        result: Sweep to report
        out_dir: Output directory (created if needed)
        groups: Box-plot groups, name -> cell ids; defaults to one group of all cells

    Returns:
        Written file names in a fixed order

    Raises:
        StabilityValidationError: Empty result or unwritable directory
    """
    if not result.cells or not result.records:
        raise StabilityValidationError("emit_report needs a non-empty sweep result")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise StabilityValidationError(f"cannot create report directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise StabilityValidationError(f"report directory is not writable: {out_dir}")

    names: List[str] = []
    runner_up = result.runner_up

    rows = []
    for cell in result.cells:
        s = cell.summary
        is_best = runner_up is not None and cell.cell_id == runner_up.cell_a
        rows.append([
            cell.cell_id, s.n, s.std, s.mean, s.max, s.failed_count, s.diverged_count, s.s_variance, s.s_per_point,
            runner_up.statistic if is_best else None,
            runner_up.pvalue if is_best else None,
            "*" if is_best and runner_up.significant else "",
        ])
    write_csv(out_dir / "summary.csv",
              ["cell_id", "n", "std", "mean", "max", "failed_count", "diverged_count", "s_variance", "s_per_point",
               "runner_up_W", "runner_up_p", "marker"], rows)
    names.append("summary.csv")

    write_csv(out_dir / "levene.csv", ["cell_a", "cell_b", "W", "p", "significant"],
              ([c.cell_a, c.cell_b, c.statistic, c.pvalue, c.significant] for c in result.comparisons))
    names.append("levene.csv")

    write_csv(out_dir / "boxplot.csv", ["cell_id", "seed", "metric", "failed", "diverged"],
              ([cell.cell_id, r.seed, r.final_metric, r.failed, r.diverged]
               for cell in result.cells for r in cell.records))
    names.append("boxplot.csv")

    write_csv(out_dir / "scatter.csv", ["run_id", "cell_id", "seed", "final_train_loss", "final_dev_metric"],
              ([r.run_id, cell.cell_id, r.seed, r.final_train_loss, r.final_metric]
               for cell in result.cells for r in cell.records))
    names.append("scatter.csv")

    curve_rows = []
    curve_plots = []
    for index, cell in enumerate(result.cells):
        bands = {}
        for outcome, members in (("successful", [r for r in cell.records if not r.failed]),
                                 ("failed", [r for r in cell.records if r.failed])):
            if not members:
                continue
            for trace in ("train_loss", "dev_metric"):
                band = curve_band(members, trace)
                curve_rows.extend([cell.cell_id, outcome, trace, it, m, sd, n]
                                  for it, m, sd, n in zip(band.iterations, band.mean, band.std, band.count))
                if trace == "train_loss" and band.iterations:
                    bands[f"{outcome} ({len(members)})"] = (band.iterations, band.mean, band.std)
        curve_plots.append((f"curves_c{index:03d}.svg", cell.cell_id, bands))
    write_csv(out_dir / "curves.csv", ["cell_id", "outcome", "trace", "iteration", "mean", "std", "n"], curve_rows)
    names.append("curves.csv")

    signatures = signature_table(result)
    sig_header = ["cell_id", "seed", "run_id", "final_train_loss", "trivial_loss", "trivial",
                  "below_baseline", "signature"]
    write_csv(out_dir / "signatures.csv", sig_header, ([row[k] for k in sig_header] for row in signatures))
    names.append("signatures.csv")

    baselines = [r.baseline for r in result.records if r.baseline is not None]
    baseline = baselines[0] if baselines and all(b == baselines[0] for b in baselines) else None
    metric = result.records[0].metric
    for group, members in (groups or {"all": [c.cell_id for c in result.cells]}).items():
        series = {cid: result.cell(cid).metrics for cid in members}
        name = f"boxplot_{_slug(group)}.svg"
        plots.boxplot_svg(out_dir / name, series, title=f"{result.plan.get('name', 'sweep')}: {group}",
                          ylabel=metric, baseline=baseline)
        names.append(name)

    for name, cid, bands in curve_plots:
        plots.band_svg(out_dir / name, bands, title=cid, xlabel="iteration", ylabel="training loss")
        names.append(name)

    save_json(result.to_dict(), out_dir / "sweep_result.json")
    names.append("sweep_result.json")
    logger.info("sweep report written to %s (%d files)", out_dir, len(names))
    return names


def summary_from_boxplot(rows: Sequence[Dict[str, str]]) -> Dict[str, Dict[str, float]]:
    """Recompute per-cell std/mean/max/failed count from boxplot.csv rows."""
    metrics: Dict[str, List[float]] = {}
    failed: Dict[str, int] = {}
    for row in rows:
        cid = row["cell_id"]
        metrics.setdefault(cid, []).append(float(row["metric"]))
        failed[cid] = failed.get(cid, 0) + (row["failed"] == "true")
    result = {}
    for cid, values in metrics.items():
        stats = summary_stats(values)
        result[cid] = {
            "std": stats.std if stats.std is not None else math.nan,
            "mean": stats.mean,
            "max": stats.max,
            "failed_count": failed[cid],
        }
    return result
