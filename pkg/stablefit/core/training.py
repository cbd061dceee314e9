"""
Training runners for pre-training and fine-tuning.

Each runner owns one run: it derives every random stream from the run
seed, iterates shuffled mini-batches (last partial batch kept), and per
step computes loss and gradients, records pre-clip gradient norms per
group, clips, applies the scheduled ADAM update, and appends to the run's
traces. A non-finite loss, gradient or norm ends the run early with
failure_reason "divergence"; the last finite parameters are kept.
"""

import logging
import math
import time
from typing import Callable, Dict, List, Tuple

import numpy as np

from .autodiff import no_grad, value_and_grad
from .data import Corpus, TaskDataset, downsample, majority_baseline, mask_batch
from .ids import run_id
from .metrics import task_metric
from .model import ClassifyBatch, MlmBatch, expected_param_shapes, forward_classify, forward_mlm, init_params, predict
from .optim import adam_update, clip_global_norm, learning_rate
from .params import ParamStore, global_norm, group_of
from .rng import RngStream
from .types import AdamState, Checkpoint, EvalPoint, Mode, ModelConfig, RunConfig, RunRecord
from .validate import NonFiniteError, StabilityValidationError, ensure_checkpoint

logger = logging.getLogger(__name__)

EVAL_CHUNK = 256


def classify_failed_run(final_metric: float, baseline: float) -> bool:
    """
    A run fails when its final dev metric does not exceed the majority baseline.

    Raises:
        StabilityValidationError: If either value is not finite
    """
    if not (math.isfinite(final_metric) and math.isfinite(baseline)):
        raise StabilityValidationError(f"classify_failed_run needs finite values, got {final_metric}, {baseline}")
    return final_metric <= baseline


def layer_gradient_norms(grads: ParamStore, granularity: str = "layer") -> Dict[str, float]:
    """
    L2 norm of the gradients in each parameter group (float64).

    Groups are encoder layers plus embeddings, pooler, classifier and
    mlm_head at ``layer`` granularity, or individual matrices
    (``layer3.attention.key`` ...) at ``matrix`` granularity.
    """
    members: Dict[str, List[np.ndarray]] = {}
    for name, g in grads.items():
        members.setdefault(group_of(name, granularity), []).append(g)
    return {group: global_norm(arrays) for group, arrays in members.items()}


class RunnerBase:
    """Base class for training runners."""

    kind = ""
    metric_name = ""

    def __init__(self, config: RunConfig):
        self.config = config
        self.stream = RngStream(config.seed)

    def run(self, *args, **kwargs) -> Tuple[RunRecord, Checkpoint]:
        raise NotImplementedError("Subclasses must implement run()")

    def _new_record(self, planned: int) -> RunRecord:
        echo = self.config.to_dict()
        return RunRecord(
            run_id=run_id(echo),
            kind=self.kind,
            config=echo,
            metric=self.metric_name,
            planned_iterations=planned,
        )

    def _train(
        self,
        params: ParamStore,
        num_examples: int,
        batch_loss: Callable[[ParamStore, np.ndarray, int], object],
        evaluate: Callable[[ParamStore], float],
        record: RunRecord,
    ) -> ParamStore:
        """Shared optimization loop; returns the last finite parameters."""
        config = self.config
        schedule = config.resolve_schedule(num_examples)
        total = schedule.total_steps
        state = AdamState.zeros(params)
        granularity = config.grad_norm_granularity

        since_eval: List[float] = []
        record.evals.append(EvalPoint(0, evaluate(params), None))

        t = 0
        epoch = 0
        while t < total:
            order = self.stream.split("shuffle", epoch).generator.permutation(num_examples)
            for start in range(0, num_examples, config.batch_size):
                if t >= total:
                    break
                index = order[start:start + config.batch_size]
                lr = learning_rate(t, schedule)
                try:
                    loss, grads = value_and_grad(lambda p: batch_loss(p, index, t), params)
                    norms = layer_gradient_norms(grads, granularity)
                    if config.adam.clip_norm is not None:
                        grads, _ = clip_global_norm(grads, config.adam.clip_norm)
                    step = adam_update(params, grads, state, config.adam, lr)
                except NonFiniteError as exc:
                    record.failure_reason = "divergence"
                    logger.warning("%s diverged at iteration %d: %s", record.run_id, t + 1, exc)
                    break

                params, state = step.params, step.state
                t += 1
                record.losses.append(loss)
                record.lrs.append(step.lr)
                record.bias_correction_factors.append(step.factor)
                for group, value in norms.items():
                    record.grad_norms.setdefault(group, []).append(value)
                since_eval.append(loss)
                logger.debug("%s it=%d loss=%.6f lr=%.3e factor=%.6f", record.run_id, t, loss, lr, step.factor)

                if t % config.eval_every == 0 or t == total:
                    record.evals.append(EvalPoint(t, evaluate(params), float(np.mean(since_eval))))
                    since_eval = []
            if record.failure_reason:
                break
            epoch += 1

        if record.evals[-1].iteration != t:
            mean_loss = float(np.mean(since_eval)) if since_eval else None
            record.evals.append(EvalPoint(t, evaluate(params), mean_loss))

        per_epoch = config.iterations_per_epoch(num_examples)
        tail = record.losses[-per_epoch:]
        record.final_train_loss = float(np.mean(tail)) if tail else float("nan")
        record.final_metric = record.evals[-1].dev_metric
        return params


class FinetuneRunner(RunnerBase):
    """Fine-tunes an encoder checkpoint with a fresh classifier head."""

    kind = "finetune"

    def run(self, train: TaskDataset, dev: TaskDataset, init: Checkpoint) -> Tuple[RunRecord, Checkpoint]:
        """
        Args:
            train: Training split
            dev: Dev split (evaluated in full, dropout off)
            init: Encoder checkpoint (pre-trained or freshly initialized)

        Returns:
            (RunRecord, final Checkpoint with heads ("classifier",))
        """
        config = self.config
        ensure_checkpoint(init, "run_finetune")
        if train.num_classes != dev.num_classes or train.metric != dev.metric:
            raise StabilityValidationError("train and dev splits describe different tasks")
        vocab_needed = max(train.vocab_max(), dev.vocab_max()) + 1
        if vocab_needed > init.config.vocab_size:
            raise StabilityValidationError(
                f"dataset uses {vocab_needed} token ids but the checkpoint vocabulary is {init.config.vocab_size}"
            )
        if config.train_subset is not None:
            train = downsample(train, config.train_subset, config.subset_seed)

        self.metric_name = train.metric
        model_config = init.config.with_heads(("classifier",)).replace(num_classes=train.num_classes)
        if config.dropout is not None:
            model_config = model_config.replace(dropout_p=config.dropout)
        params = self._initial_params(init, model_config)

        record = self._new_record(config.total_steps(len(train)))
        record.baseline = majority_baseline(dev, train)
        dropout_stream = self.stream.split("dropout")

        def batch_loss(p: ParamStore, index: np.ndarray, t: int):
            batch = ClassifyBatch(train.tokens[index], train.labels[index])
            return forward_classify(p, model_config, batch, Mode.TRAIN, dropout_stream.split(t)).loss

        def evaluate(p: ParamStore) -> float:
            preds, _ = predict(p, model_config, dev.tokens, dev.labels, EVAL_CHUNK)
            self._last_correct = preds == dev.labels
            return task_metric(dev.metric, preds, dev.labels, dev.num_classes)

        started = time.perf_counter()
        params = self._train(params, len(train), batch_loss, evaluate, record)
        record.wall_time = time.perf_counter() - started

        record.dev_correct = [bool(c) for c in self._last_correct]
        record.failed = record.diverged or classify_failed_run(record.final_metric, record.baseline)
        logger.info("%s finished: %s=%.4f baseline=%.4f failed=%s",
                    record.run_id, record.metric, record.final_metric, record.baseline, record.failed)
        return record, Checkpoint(model_config, params, f"finetuned-seed{config.seed}")

    def _initial_params(self, init: Checkpoint, model_config: ModelConfig) -> ParamStore:
        head = init_params(model_config, self.config.seed, heads=("classifier",))
        params = ParamStore()
        for name in expected_param_shapes(model_config):
            source = head if name in head else init.params
            params.add(name, source[name].copy())
        return params


class PretrainRunner(RunnerBase):
    """Masked-LM pre-training with held-out perplexity evaluation."""

    kind = "pretrain"
    metric_name = "perplexity"

    def run(self, corpus: Corpus, init: Checkpoint) -> Tuple[RunRecord, Checkpoint]:
        """
        Args:
            corpus: Pre-training corpus; its tail (held_out_fraction) is held out
            init: Initial checkpoint; only the encoder and MLM head are used

        Returns:
            (RunRecord, final Checkpoint with heads ("mlm",))
        """
        config = self.config
        ensure_checkpoint(init, "run_pretrain")
        held = max(1, int(math.ceil(config.held_out_fraction * len(corpus))))
        if held >= len(corpus):
            raise StabilityValidationError(f"corpus of {len(corpus)} sequences leaves nothing to train on")
        train = corpus.slice(0, len(corpus) - held, "train")
        held_out = corpus.slice(len(corpus) - held, len(corpus), "held_out")

        model_config = init.config.with_heads(("mlm",))
        if config.dropout is not None:
            model_config = model_config.replace(dropout_p=config.dropout)
        if "mlm" not in init.config.heads:
            raise StabilityValidationError("run_pretrain needs a checkpoint with the mlm head")
        params = ParamStore((name, init.params[name].copy()) for name in expected_param_shapes(model_config))

        eval_batches = held_out_batches(held_out, model_config, config.mask_rate, self.stream.split("mask", "held_out"))
        record = self._new_record(config.total_steps(len(train)))
        dropout_stream = self.stream.split("dropout")
        mask_stream = self.stream.split("mask")

        def batch_loss(p: ParamStore, index: np.ndarray, t: int):
            batch = mask_batch(train.sequences[index], mask_stream.split(t).generator,
                               config.mask_rate, vocab_size=model_config.vocab_size)
            return forward_mlm(p, model_config, batch, Mode.TRAIN, dropout_stream.split(t)).loss

        def evaluate(p: ParamStore) -> float:
            return math.exp(mlm_loss(p, model_config, eval_batches))

        started = time.perf_counter()
        params = self._train(params, len(train), batch_loss, evaluate, record)
        record.wall_time = time.perf_counter() - started
        record.failed = record.diverged
        logger.info("%s finished: perplexity=%.3f", record.run_id, record.final_metric)
        return record, Checkpoint(model_config, params, f"pretrained-seed{config.seed}")


def held_out_batches(corpus: Corpus, config: ModelConfig, mask_rate: float, stream: RngStream,
                     chunk: int = EVAL_CHUNK) -> List[MlmBatch]:
    """Mask an evaluation corpus once, chunk by chunk, from one generator."""
    gen = stream.generator
    return [
        mask_batch(corpus.sequences[start:start + chunk], gen, mask_rate, vocab_size=config.vocab_size)
        for start in range(0, len(corpus), chunk)
    ]


def mlm_loss(params: ParamStore, config: ModelConfig, batches: List[MlmBatch]) -> float:
    """Mean masked-LM loss over all masked positions of fixed batches (eval mode)."""
    total, count = 0.0, 0
    with no_grad():
        for batch in batches:
            out = forward_mlm(params, config, batch, Mode.EVAL)
            n = len(batch.targets)
            total += float(out.loss.data) * n
            count += n
    return total / count


def run_finetune(config: RunConfig, train: TaskDataset, dev: TaskDataset,
                 init: Checkpoint) -> Tuple[RunRecord, Checkpoint]:
    return FinetuneRunner(config).run(train, dev, init)


def run_pretrain(config: RunConfig, corpus: Corpus, init: Checkpoint) -> Tuple[RunRecord, Checkpoint]:
    return PretrainRunner(config).run(corpus, init)


def classification_gradient_norm(checkpoint: Checkpoint, batch: ClassifyBatch) -> float:
    """Global gradient norm of the eval-mode classification loss at a checkpoint."""
    _, grads = value_and_grad(
        lambda p: forward_classify(p, checkpoint.config, batch, Mode.EVAL).loss, checkpoint.params
    )
    return global_norm(grads.values())
