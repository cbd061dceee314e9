"""
Catastrophic-forgetting probe.

Restores the top-k encoder layers of a fine-tuned checkpoint to their
pre-trained values and measures masked-LM perplexity for k = 0..L. The
mask pattern is drawn once from ``mask_seed`` and reused for every k, so
differences along the curve come from the weights alone.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

from . import plots
from .data import Corpus
from .model import substitute_top_layers
from .rng import RngStream
from .serialize import save_json, write_csv
from .training import held_out_batches, mlm_loss
from .types import Checkpoint, RunRecord
from .validate import StabilityValidationError, ensure_checkpoint, ensure_count, ensure_same_architecture

logger = logging.getLogger(__name__)

TRIVIAL_LOSS_TOLERANCE = 0.05
OPTIMIZATION_FAILURE = "optimization failure"
DIVERGED = "diverged"


@dataclass
class SubstitutionCurve:
    """Perplexity per k; index k restores the top k layers."""
    k_values: List[int]
    losses: List[float]
    perplexities: List[float]
    fine_tuned: str
    pre_trained: str
    corpus: str
    mask_seed: int
    mask_rate: float
    reference_perplexity: float = float("nan")

    @property
    def num_layers(self) -> int:
        return self.k_values[-1]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SubstitutionCurve":
        return cls(**data)


def substitution_curve(fine_tuned: Checkpoint, pre_trained: Checkpoint, eval_corpus: Corpus,
                       mask_seed: int, mask_rate: float = 0.15, workers: int = 1) -> SubstitutionCurve:
    """
    Masked-LM perplexity of hybrids with the top-k layers restored.

    Args:
        fine_tuned: Fine-tuned checkpoint
        pre_trained: Pre-trained checkpoint; must carry the MLM head
        eval_corpus: Evaluation corpus; must not be a training split
        mask_seed: Seed of the fixed mask pattern
        mask_rate: Fraction of positions masked
        workers: Threads evaluating k values concurrently

    Raises:
        StabilityValidationError: Architecture mismatch, missing MLM head or a training corpus
    """
    ensure_checkpoint(fine_tuned, "substitution_curve")
    ensure_checkpoint(pre_trained, "substitution_curve")
    ensure_same_architecture(fine_tuned, pre_trained, "substitution_curve")
    ensure_count("workers", workers)
    if "mlm" not in pre_trained.config.heads:
        raise StabilityValidationError("substitution_curve needs a pre-trained checkpoint with the mlm head")
    if eval_corpus.split == "train":
        raise StabilityValidationError("substitution_curve must evaluate on a held-out corpus, got split 'train'")

    num_layers = pre_trained.config.num_layers
    batches = held_out_batches(eval_corpus, pre_trained.config, mask_rate, RngStream(mask_seed).split("mask", "probe"))

    def evaluate(k: int) -> float:
        hybrid = substitute_top_layers(fine_tuned, pre_trained, k)
        return mlm_loss(hybrid.params, hybrid.config, batches)

    ks = list(range(num_layers + 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        losses = list(pool.map(evaluate, ks))
    reference = mlm_loss(pre_trained.params, pre_trained.config, batches)

    curve = SubstitutionCurve(
        k_values=ks,
        losses=losses,
        perplexities=[math.exp(loss) for loss in losses],
        fine_tuned=fine_tuned.hash(),
        pre_trained=pre_trained.hash(),
        corpus=eval_corpus.hash(),
        mask_seed=mask_seed,
        mask_rate=mask_rate,
        reference_perplexity=math.exp(reference),
    )
    logger.info("substitution curve: ppl k=0 %.3f, k=%d %.3f", curve.perplexities[0], num_layers,
                curve.perplexities[-1])
    return curve


def write_curve(curve: SubstitutionCurve, out_dir: Union[str, Path]) -> List[str]:
    out_dir = Path(out_dir)
    write_csv(out_dir / "curve.csv", ["k", "loss", "perplexity"],
              zip(curve.k_values, curve.losses, curve.perplexities))
    plots.line_svg(out_dir / "curve.svg", {"hybrid": (curve.k_values, curve.perplexities)},
                   title="Top-k layers restored to pre-trained weights", xlabel="k", ylabel="MLM perplexity",
                   logy=True)
    save_json(curve.to_dict(), out_dir / "curve.json")
    return ["curve.csv", "curve.svg", "curve.json"]


@dataclass
class FailureSignature:
    run_id: str
    final_train_loss: float
    trivial_loss: float
    trivial: bool
    below_baseline: bool
    signature: str = field(default="")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def failure_signature(record: RunRecord, num_classes: int,
                      tolerance: float = TRIVIAL_LOSS_TOLERANCE) -> FailureSignature:
    """
    Check a run for the trivial-loss signature of an optimization failure.

    The final-epoch mean training loss is trivial when it lies within
    ``tolerance`` of ln(num_classes), the loss of uniform predictions.
    A run that stopped before completing an iteration has no training
    loss; it is never trivial and is labelled "diverged" when it ended
    on a non-finite step.

    Raises:
        StabilityValidationError: Fewer than two classes
    """
    ensure_count("num_classes", num_classes, minimum=2)
    center = math.log(num_classes)
    loss = record.final_train_loss if record.iterations else float("nan")
    trivial = math.isfinite(loss) and abs(loss - center) <= tolerance
    below = record.baseline is not None and record.final_metric <= record.baseline
    if record.iterations == 0 and record.diverged:
        signature = DIVERGED
    elif trivial and below:
        signature = OPTIMIZATION_FAILURE
    elif below:
        signature = "below baseline"
    elif trivial:
        signature = "trivial loss"
    else:
        signature = "none"
    return FailureSignature(record.run_id, loss, center, trivial, below, signature)
