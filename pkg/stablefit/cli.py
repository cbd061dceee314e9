"""
Command-line interface for stablefit.

Usage:
    stablefit pretrain --config experiment.json --out runs/pretrain
    stablefit finetune --config experiment.json --set run.init_checkpoint=runs/pretrain/checkpoint.bin
    stablefit sweep --config experiment.json --workers 4 --set sweep.plan=ablation-grid
    stablefit surface --config experiment.json
    stablefit forgetting --config experiment.json --set probe.mask_seed=3
    stablefit report runs/sweep
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from . import __version__
from .core import plots
from .core.config import ExperimentConfig, load_config, output_root
from .core.data import TaskDataset, generate_classification_task, generate_corpus
from .core.forgetting import SubstitutionCurve, substitution_curve, write_curve
from .core.ids import file_hash
from .core.landscape import (
    SurfaceSpec,
    batch_hash,
    gradient_norm_surface,
    loss_surface,
    surface_batch,
    write_surface,
)
from .core.model import init_checkpoint
from .core.provenance import MANIFEST_NAME, Manifest
from .core.serialize import load_checkpoint, load_json, load_run_record, save_checkpoint, save_json, write_run_traces
from .core.sweep import SweepPlan, SweepResult, bundled_plan, emit_report, groups_by_axis, run_sweep
from .core.training import run_finetune, run_pretrain
from .core.types import Checkpoint, RunRecord
from .core.validate import ArtifactMissingError, ConfigError, NonFiniteError, StabilityValidationError

logger = logging.getLogger("stablefit")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 1

    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr)

    handlers = {
        "pretrain": command_pretrain,
        "finetune": command_finetune,
        "sweep": command_sweep,
        "surface": command_surface,
        "forgetting": command_forgetting,
        "report": command_report,
    }
    try:
        handlers[args.command](args)
    except (ConfigError, ArtifactMissingError) as exc:
        _error_line(exc)
        return 2
    except Exception as exc:  # noqa: BLE001
        _error_line(exc)
        logger.debug("command failed", exc_info=True)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stablefit",
        description="Fine-tuning stability experiments on a toy transformer",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", help="Commands")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment config JSON file")
    common.add_argument("--out", help="Output directory (overrides STABLEFIT_OUTPUT_ROOT and output_dir)")
    common.add_argument("--seed", type=int, help="Run seed")
    common.add_argument("--workers", type=int, help="Worker count for sweeps, surfaces and probes")
    common.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                        help="Override a config value by dotted path (repeatable)")
    common.add_argument("--preset", help="Optimizer preset (bert-like, roberta-like, albert-like)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--quiet", action="store_true", help="Warnings only")

    subparsers.add_parser("pretrain", parents=[common], help="Masked-LM pre-training")
    subparsers.add_parser("finetune", parents=[common], help="Fine-tune one run")
    subparsers.add_parser("sweep", parents=[common], help="Run a multi-seed sweep plan")
    subparsers.add_parser("surface", parents=[common], help="Loss / gradient-norm surfaces")
    subparsers.add_parser("forgetting", parents=[common], help="Top-k layer substitution probe")
    report = subparsers.add_parser("report", parents=[common], help="Re-emit tables and plots from artifacts")
    report.add_argument("input", help="Directory written by another command")
    return parser


def _error_line(exc: Exception) -> None:
    if isinstance(exc, ConfigError):
        code = "config"
    elif isinstance(exc, ArtifactMissingError):
        code = "artifact-missing"
    elif isinstance(exc, NonFiniteError):
        code = "non-finite"
    elif isinstance(exc, StabilityValidationError):
        code = "validation"
    else:
        code = "internal"
    payload = {"code": code, "message": str(exc), "path": getattr(exc, "path", "")}
    print("error: " + json.dumps(payload, sort_keys=True), file=sys.stderr)


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _load(args: argparse.Namespace) -> ExperimentConfig:
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.workers is not None:
        overrides += [f"{section}.workers={args.workers}" for section in ("sweep", "surface", "probe")]
    return load_config(args.config, args.preset, overrides)


def _out_dir(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    return output_root(config) / args.command


def _manifest(command: str, config: ExperimentConfig) -> Manifest:
    manifest = Manifest(command, __version__)
    manifest.add_config(config.to_dict())
    return manifest


def _finish(manifest: Manifest, out: Path, names: List[str]) -> None:
    manifest.add_artifacts(out, names)
    manifest.write(out)
    print(f"\nWrote {len(names) + 1} files to {out}/")
    for name in names + [MANIFEST_NAME]:
        print(f"  {name}")


def _task(config: ExperimentConfig, checkpoint: Checkpoint) -> Tuple[TaskDataset, TaskDataset]:
    spec, train_size, dev_size = config.data.task(checkpoint.config)
    train, dev = generate_classification_task(spec, config.data.seed, train_size, dev_size, name=config.data.profile)
    print(f"  Task {config.data.profile}: {len(train)} train / {len(dev)} dev, metric {spec.metric}")
    return train, dev


def _init_for_finetune(config: ExperimentConfig) -> Checkpoint:
    path = config.require_artifacts("finetune").get("run.init_checkpoint")
    if path is not None:
        checkpoint, _ = load_checkpoint(path)
        print(f"  Init checkpoint: {path} ({checkpoint.provenance})")
        return checkpoint
    print("  Init checkpoint: fresh initialization (no run.init_checkpoint)")
    return init_checkpoint(config.model.with_heads(("mlm",)), config.pretrain.init_seed)


def _grad_norm_plot(record: RunRecord, path: Path) -> None:
    steps = list(range(1, record.iterations + 1))
    series = {group: (steps, values) for group, values in record.grad_norms.items()}
    plots.line_svg(path, series, title=f"{record.run_id} gradient norms", xlabel="iteration",
                   ylabel="L2 norm", logy=True)


def _write_run(record: RunRecord, checkpoint: Checkpoint, out: Path) -> List[str]:
    names = write_run_traces(record, out)
    if record.grad_norms:
        _grad_norm_plot(record, out / "grad_norms.svg")
        names.append("grad_norms.svg")
    save_checkpoint(checkpoint, out / "checkpoint.bin")
    names.append("checkpoint.bin")
    return names


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def command_pretrain(args: argparse.Namespace) -> None:
    config = _load(args)
    config.require_artifacts("pretrain")
    out = _out_dir(args, config)
    print("stablefit pretrain")
    print("=" * 50)

    grammar = config.data.grammar(config.model)
    corpus = generate_corpus(grammar, config.data.seed, config.data.corpus_size, split="train")
    init = init_checkpoint(config.model.with_heads(("mlm",)), config.pretrain.init_seed)
    print(f"  Corpus: {len(corpus)} sequences of length {grammar.seq_len}")

    record, checkpoint = run_pretrain(config.pretrain_config(), corpus, init)
    print(f"  {record.iterations} iterations, held-out perplexity {record.final_metric:.3f}"
          + (" (diverged)" if record.diverged else ""))

    manifest = _manifest("pretrain", config)
    manifest.add_input("corpus", corpus.hash())
    manifest.add_input("init", init.hash())
    manifest.add("run_id", record.run_id)
    _finish(manifest, out, _write_run(record, checkpoint, out))


def command_finetune(args: argparse.Namespace) -> None:
    config = _load(args)
    out = _out_dir(args, config)
    print("stablefit finetune")
    print("=" * 50)

    init = _init_for_finetune(config)
    train, dev = _task(config, init)
    record, checkpoint = run_finetune(config.run_config(), train, dev, init)
    status = "FAILED" if record.failed else "ok"
    print(f"  {record.iterations} iterations, dev {record.metric} {record.final_metric:.4f} "
          f"(baseline {record.baseline:.4f}) {status}")

    manifest = _manifest("finetune", config)
    manifest.add_input("init", init.hash())
    manifest.add_input("train", train.hash())
    manifest.add_input("dev", dev.hash())
    manifest.add("run_id", record.run_id)
    _finish(manifest, out, _write_run(record, checkpoint, out))


def build_plan(config: ExperimentConfig, train_size: int) -> SweepPlan:
    sweep = config.sweep
    base = config.run_config()
    if sweep.plan == "custom":
        return SweepPlan(
            base=base,
            axes=[(axis[0], list(axis[1])) for axis in sweep.axes],
            cells=[dict(c) for c in sweep.cells],
            seeds=list(sweep.seeds),
            name="custom",
            dataset=config.data.profile,
            lr_scale=sweep.lr_scale,
        )
    plan = bundled_plan(sweep.plan, base, sweep.seeds, sweep.lr_scale,
                        full_train_size=train_size, subset_size=sweep.subset_size)
    plan.dataset = config.data.profile
    return plan


def command_sweep(args: argparse.Namespace) -> None:
    config = _load(args)
    out = _out_dir(args, config)
    print("stablefit sweep")
    print("=" * 50)

    init = _init_for_finetune(config)
    train, dev = _task(config, init)
    plan = build_plan(config, len(train))
    plan.init_checkpoint = config.run.init_checkpoint
    cells = plan.cell_configs()
    print(f"  Plan {plan.name}: {len(cells)} cells x {len(plan.seeds)} seeds, {config.sweep.workers} worker(s)")

    result = run_sweep(plan, train, dev, init, workers=config.sweep.workers)
    for cell in result.cells:
        s = cell.summary
        std = "n/a" if s.std is None else f"{s.std:.4f}"
        print(f"  {cell.cell_id}: mean {s.mean:.4f} std {std} max {s.max:.4f} failed {s.failed_count}/{s.n}")
    if result.runner_up is not None:
        marker = " *" if result.runner_up.significant else ""
        print(f"  Levene {result.runner_up.cell_a} vs {result.runner_up.cell_b}: "
              f"W={result.runner_up.statistic:.4g} p={result.runner_up.pvalue:.4g}{marker}")

    groups = groups_by_axis(result, config.sweep.group_by) if config.sweep.group_by else None
    names = emit_report(result, out, groups)
    manifest = _manifest("sweep", config)
    manifest.add_input("init", init.hash())
    manifest.add_input("train", train.hash())
    manifest.add_input("dev", dev.hash())
    manifest.add("plan", plan.name)
    manifest.add("seeds", list(plan.seeds))
    _finish(manifest, out, names)


def command_surface(args: argparse.Namespace) -> None:
    config = _load(args)
    paths = config.require_artifacts("surface")
    out = _out_dir(args, config)
    s = config.surface
    print("stablefit surface")
    print("=" * 50)

    pretrained, _ = load_checkpoint(paths["surface.pretrained"])
    failed, _ = load_checkpoint(paths["surface.failed"])
    successful, _ = load_checkpoint(paths["surface.successful"])
    train, _ = _task(config, failed)
    batch = surface_batch(train, s.batch_size, s.batch_seed)

    manifest = _manifest("surface", config)
    manifest.add_input("pretrained", pretrained.hash())
    manifest.add_input("failed", failed.hash())
    manifest.add_input("successful", successful.hash())
    manifest.add_input("batch", batch_hash(batch))
    manifest.add("head_seed", s.head_seed)

    names: List[str] = []
    document = {}
    for quantity in s.quantities:
        spec = SurfaceSpec(pretrained, failed, successful, a_range=s.a_range, b_range=s.b_range,
                           resolution=s.resolution, batch_size=s.batch_size, quantity=quantity,
                           head_seed=s.head_seed, workers=s.workers)
        grid = loss_surface(spec, batch) if quantity == "loss" else gradient_norm_surface(spec, batch)
        print(f"  {quantity}: {grid.shape[0]}x{grid.shape[1]} grid, corners "
              + ", ".join(f"f({k})={v:.4g}" for k, v in grid.corners.items())
              + (f", {len(grid.flagged)} non-finite" if grid.flagged else ""))
        names += write_surface(grid, out)
        document[quantity] = grid.to_dict()
    save_json(document, out / "surface.json")
    names.append("surface.json")
    _finish(manifest, out, names)


def command_forgetting(args: argparse.Namespace) -> None:
    config = _load(args)
    paths = config.require_artifacts("forgetting")
    out = _out_dir(args, config)
    p = config.probe
    print("stablefit forgetting")
    print("=" * 50)

    fine_tuned, _ = load_checkpoint(paths["probe.fine_tuned"])
    pretrained, _ = load_checkpoint(paths["probe.pretrained"])
    corpus = generate_corpus(config.data.grammar(pretrained.config), p.corpus_seed, p.eval_corpus_size, split="eval")
    curve = substitution_curve(fine_tuned, pretrained, corpus, p.mask_seed, p.mask_rate, workers=p.workers)
    for k, ppl in zip(curve.k_values, curve.perplexities):
        print(f"  k={k:2d} perplexity {ppl:.3f}")

    manifest = _manifest("forgetting", config)
    manifest.add_input("fine_tuned", fine_tuned.hash())
    manifest.add_input("pretrained", pretrained.hash())
    manifest.add_input("corpus", corpus.hash())
    _finish(manifest, out, write_curve(curve, out))


def command_report(args: argparse.Namespace) -> None:
    source = Path(args.input)
    config = _load(args)
    out = Path(args.out) if args.out else output_root(config) / "report"
    print("stablefit report")
    print("=" * 50)

    found = [name for name in ("sweep_result.json", "record.json", "curve.json", "surface.json")
             if (source / name).is_file()] if source.is_dir() else []
    if not found:
        raise ArtifactMissingError(f"no artifacts found in {source}", path=str(source))

    manifest = Manifest("report", __version__)
    names: List[str] = []
    for name in found:
        manifest.add_input(name.split(".")[0], file_hash(source / name))
    if "sweep_result.json" in found:
        result = SweepResult.from_dict(load_json(source / "sweep_result.json"))
        for cell in result.cells:
            s = cell.summary
            std = "n/a" if s.std is None else f"{s.std:.4f}"
            print(f"  {cell.cell_id}: mean {s.mean:.4f} std {std} failed {s.failed_count}/{s.n}")
        names += emit_report(result, out)
    if "record.json" in found:
        record = load_run_record(source)
        print(f"  {record.run_id}: {record.metric} {record.final_metric:.4f} failed={record.failed}")
        names += write_run_traces(record, out)
        if record.grad_norms:
            _grad_norm_plot(record, out / "grad_norms.svg")
            names.append("grad_norms.svg")
    if "curve.json" in found:
        curve = SubstitutionCurve.from_dict(load_json(source / "curve.json"))
        print(f"  substitution curve: k=0 {curve.perplexities[0]:.3f}, k={curve.num_layers} {curve.perplexities[-1]:.3f}")
        names += write_curve(curve, out)
    if "surface.json" in found:
        for quantity, grid in load_json(source / "surface.json").items():
            print(f"  surface {quantity}: corners {grid['corners']}")
            values = np.array([[np.nan if v is None else v for v in row] for row in grid["values"]])
            name = f"surface_{quantity.replace('-', '_')}.svg"
            plots.contour_svg(out / name, grid["a_values"], grid["b_values"], values, title=quantity,
                              markers={"p": (0.0, 0.0), "f": (1.0, 0.0), "s": (0.0, 1.0)})
            names.append(name)
    _finish(manifest, out, sorted(set(names), key=names.index))


if __name__ == "__main__":
    sys.exit(main())
