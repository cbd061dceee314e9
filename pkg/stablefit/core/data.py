"""
Synthetic corpora and classification tasks.

Text comes from a hidden-state Markov grammar: a small number of latent
states, each with its own skewed emission distribution over the regular
tokens, and sticky transitions. Masked-token prediction is learnable
(tokens reveal their state, states persist) but not trivial (emissions
overlap). Classification labels threshold a position-weighted occupancy
of one marker state, so a model that has learned the grammar during
pre-training has a head start on the task.

Token ids 0 and 1 are reserved for [CLS] and [MASK]; every sequence starts
with [CLS].
"""

import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .ids import tokens_hash
from .model import CLS_TOKEN, MASK_TOKEN, NUM_SPECIAL_TOKENS, ClassifyBatch, MlmBatch
from .rng import RngStream
from .types import MetricName
from .validate import StabilityValidationError, ensure_count, ensure_probability

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GrammarSpec:
    """
    Parameters of the latent Markov grammar.

    Attributes:
        vocab_size: Total vocabulary including the two special tokens
        seq_len: Sequence length including the leading [CLS]
        num_states: Latent states
        stay_prob: Probability of keeping the current state at each position
        emission_purity: Probability mass a state puts on its own token band
        zipf_exponent: Skew of emissions inside a band
        grammar_seed: Seed of the emission tables (part of the grammar, not the sample)
    """
    vocab_size: int = 256
    seq_len: int = 32
    num_states: int = 4
    stay_prob: float = 0.8
    emission_purity: float = 0.8
    zipf_exponent: float = 1.1
    grammar_seed: int = 1234

    def __post_init__(self) -> None:
        ensure_count("vocab_size", self.vocab_size, minimum=NUM_SPECIAL_TOKENS + self.num_states)
        ensure_count("seq_len", self.seq_len, minimum=2)
        ensure_count("num_states", self.num_states, minimum=2)
        ensure_probability("stay_prob", self.stay_prob, upper_inclusive=True)
        ensure_probability("emission_purity", self.emission_purity, upper_inclusive=True)

    @property
    def num_regular(self) -> int:
        return self.vocab_size - NUM_SPECIAL_TOKENS

    def emission_table(self) -> np.ndarray:
        """Per-state distribution over regular tokens (num_states x num_regular)."""
        gen = RngStream(self.grammar_seed).split("grammar").generator
        bands = np.array_split(gen.permutation(self.num_regular), self.num_states)
        table = np.full((self.num_states, self.num_regular),
                        (1.0 - self.emission_purity) / self.num_regular)
        for state, band in enumerate(bands):
            ranks = np.arange(1, len(band) + 1, dtype=np.float64)
            weights = ranks ** -self.zipf_exponent
            table[state, band] += self.emission_purity * weights / weights.sum()
        return table / table.sum(axis=1, keepdims=True)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class TaskSpec:
    """
    Classification task over the grammar.

    Attributes:
        grammar: Text generator
        class_balance: Target class fractions, lowest score first
        metric: accuracy | f1 | mcc
        marker_state: Latent state whose weighted occupancy drives the label
        label_noise: Probability of replacing a label with a different class
        calibration_size: Pilot sample used to place the class thresholds
    """
    grammar: GrammarSpec = field(default_factory=GrammarSpec)
    class_balance: Tuple[float, ...] = (0.53, 0.47)
    metric: str = MetricName.ACCURACY.value
    marker_state: int = 0
    label_noise: float = 0.0
    calibration_size: int = 4096

    def __post_init__(self) -> None:
        if len(self.class_balance) < 2 or any(b <= 0 for b in self.class_balance):
            raise StabilityValidationError(f"class_balance needs >= 2 positive fractions, got {self.class_balance}")
        if abs(sum(self.class_balance) - 1.0) > 1e-9:
            raise StabilityValidationError(f"class_balance must sum to 1, got {self.class_balance}")
        if self.metric not in ("accuracy", "f1", "mcc"):
            raise StabilityValidationError(f"unknown task metric: {self.metric!r}")
        ensure_probability("label_noise", self.label_noise)
        if not 0 <= self.marker_state < self.grammar.num_states:
            raise StabilityValidationError(f"marker_state {self.marker_state} out of range")

    @property
    def num_classes(self) -> int:
        return len(self.class_balance)


@dataclass
class Corpus:
    """Unlabeled sequences plus the (spec, seed) that regenerate them."""
    sequences: np.ndarray
    vocab_size: int
    spec: GrammarSpec
    seed: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.sequences)

    def hash(self) -> str:
        return tokens_hash(self.sequences)

    def slice(self, start: int, stop: int, split: str) -> "Corpus":
        return Corpus(self.sequences[start:stop], self.vocab_size, self.spec, self.seed, split)


@dataclass
class TaskDataset:
    """Labeled sequences of one split."""
    tokens: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str
    metric: str
    name: str = "task"

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, indices: np.ndarray) -> ClassifyBatch:
        return ClassifyBatch(self.tokens[indices], self.labels[indices])

    def hash(self) -> str:
        return tokens_hash(np.concatenate([self.tokens, self.labels[:, None]], axis=1))

    def vocab_max(self) -> int:
        return int(self.tokens.max()) if self.tokens.size else 0


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _sample_sequences(spec: GrammarSpec, gen: np.random.Generator, size: int,
                      table: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Sample (tokens, states); position 0 holds [CLS] and has no state."""
    table = spec.emission_table() if table is None else table
    body = spec.seq_len - 1
    states = np.empty((size, body), dtype=np.int64)
    states[:, 0] = gen.integers(0, spec.num_states, size)
    for pos in range(1, body):
        switch = gen.random(size) >= spec.stay_prob
        jump = gen.integers(1, spec.num_states, size)
        states[:, pos] = np.where(switch, (states[:, pos - 1] + jump) % spec.num_states, states[:, pos - 1])

    u = gen.random((size, body))
    cdf = np.cumsum(table, axis=1)
    emitted = np.empty((size, body), dtype=np.int64)
    for state in range(spec.num_states):
        where = states == state
        emitted[where] = np.searchsorted(cdf[state], u[where], side="right")
    emitted = np.minimum(emitted, spec.num_regular - 1) + NUM_SPECIAL_TOKENS

    tokens = np.empty((size, spec.seq_len), dtype=np.int64)
    tokens[:, 0] = CLS_TOKEN
    tokens[:, 1:] = emitted
    return tokens, states


def generate_corpus(spec: GrammarSpec, seed: int, size: int, split: str = "train") -> Corpus:
    """
    Generate ``size`` grammar sequences of length ``spec.seq_len``.

    Raises:
        StabilityValidationError: If size < 1
    """
    ensure_count("size", size)
    gen = RngStream(seed).split("corpus", split).generator
    tokens, _ = _sample_sequences(spec, gen, size)
    return Corpus(tokens, spec.vocab_size, spec, seed, split)


def _occupancy_score(states: np.ndarray, marker: int) -> np.ndarray:
    weights = 1.0 + 0.5 * np.arange(states.shape[1]) / states.shape[1]
    return ((states == marker) * weights).sum(axis=1) / weights.sum()


def _labels(spec: TaskSpec, states: np.ndarray, thresholds: np.ndarray,
            noise_gen: np.random.Generator) -> np.ndarray:
    labels = np.searchsorted(thresholds, _occupancy_score(states, spec.marker_state), side="right")
    if spec.label_noise > 0:
        flip = noise_gen.random(len(labels)) < spec.label_noise
        shift = noise_gen.integers(1, spec.num_classes, len(labels))
        labels = np.where(flip, (labels + shift) % spec.num_classes, labels)
    return labels.astype(np.int64)


def generate_classification_task(spec: TaskSpec, seed: int, train_size: int, dev_size: int,
                                 name: str = "task") -> Tuple[TaskDataset, TaskDataset]:
    """
    Generate a train/dev pair labeled by the latent marker-state occupancy.

    Class thresholds are the cumulative class_balance quantiles of the
    occupancy score on a pilot sample, so realized class fractions track
    class_balance. Dev sequences that also occur in train are dropped and
    resampled, so the splits share no sequence.

    Raises:
        StabilityValidationError: If a size is < 1
    """
    ensure_count("train_size", train_size)
    ensure_count("dev_size", dev_size)
    grammar = spec.grammar
    table = grammar.emission_table()
    root = RngStream(seed).split("task")

    _, pilot = _sample_sequences(grammar, root.split("calibration").generator, spec.calibration_size, table)
    cuts = np.cumsum(spec.class_balance)[:-1]
    thresholds = np.quantile(_occupancy_score(pilot, spec.marker_state), cuts)

    train_tokens, train_states = _sample_sequences(grammar, root.split("train").generator, train_size, table)
    train_labels = _labels(spec, train_states, thresholds, root.split("noise", "train").generator)

    seen = {row.tobytes() for row in train_tokens}
    dev_gen = root.split("dev").generator
    kept_tokens, kept_states = [], []
    count = 0
    while count < dev_size:
        tokens, states = _sample_sequences(grammar, dev_gen, dev_size, table)
        fresh = np.array([row.tobytes() not in seen for row in tokens])
        for row in tokens[fresh]:
            seen.add(row.tobytes())
        kept_tokens.append(tokens[fresh])
        kept_states.append(states[fresh])
        count += int(fresh.sum())
    dev_tokens = np.concatenate(kept_tokens)[:dev_size]
    dev_states = np.concatenate(kept_states)[:dev_size]
    dev_labels = _labels(spec, dev_states, thresholds, root.split("noise", "dev").generator)

    train = TaskDataset(train_tokens, train_labels, spec.num_classes, "train", spec.metric, name)
    dev = TaskDataset(dev_tokens, dev_labels, spec.num_classes, "dev", spec.metric, name)
    logger.debug("task %s: train balance %s", name, np.bincount(train_labels, minlength=spec.num_classes) / train_size)
    return train, dev


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskPolicy:
    """Replacement fractions for selected positions: [MASK], random token, unchanged."""
    mask: float = 0.8
    random: float = 0.1
    keep: float = 0.1

    def __post_init__(self) -> None:
        if min(self.mask, self.random, self.keep) < 0 or abs(self.mask + self.random + self.keep - 1.0) > 1e-9:
            raise StabilityValidationError(f"mask policy fractions must be >= 0 and sum to 1: {self}")


def expected_mask_count(length: int, mask_rate: float) -> float:
    return length * mask_rate


def mask_tokens(sequence: np.ndarray, rng: np.random.Generator, mask_rate: float = 0.15,
                policy: MaskPolicy = MaskPolicy(), vocab_size: int = 256,
                protected: Sequence[int] = (), select_all: bool = False
                ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    BERT-style masking of one sequence.

    Each non-protected position is selected with probability mask_rate; a
    selected position becomes [MASK] (policy.mask), a random regular token
    (policy.random) or stays unchanged (policy.keep). When no position is
    selected the draw is repeated once, then one position is forced.

    Args:
        sequence: Token ids
        rng: Masking generator
        mask_rate: Selection probability in (0, 1)
        policy: Replacement fractions
        vocab_size: Vocabulary for random replacements
        protected: Positions never selected (e.g. [CLS] at 0)
        select_all: Test hook selecting every non-protected position

    Returns:
        (masked sequence, targets, positions)
    """
    if not 0.0 < mask_rate < 1.0:
        raise StabilityValidationError(f"mask_rate must lie in (0, 1), got {mask_rate}")
    sequence = np.asarray(sequence)
    eligible = np.ones(len(sequence), dtype=bool)
    eligible[np.asarray(protected, dtype=np.intp)] = False
    if not eligible.any():
        raise StabilityValidationError("mask_tokens: every position is protected")

    if select_all:
        selected = eligible.copy()
    else:
        selected = (rng.random(len(sequence)) < mask_rate) & eligible
        if not selected.any():
            selected = (rng.random(len(sequence)) < mask_rate) & eligible
        if not selected.any():
            candidates = np.flatnonzero(eligible)
            selected[candidates[rng.integers(len(candidates))]] = True
            logger.debug("mask_tokens: forced one position")

    positions = np.flatnonzero(selected)
    targets = sequence[positions].copy()
    masked = sequence.copy()
    roll = rng.random(len(positions))
    to_mask = roll < policy.mask
    to_random = (roll >= policy.mask) & (roll < policy.mask + policy.random)
    masked[positions[to_mask]] = MASK_TOKEN
    masked[positions[to_random]] = rng.integers(NUM_SPECIAL_TOKENS, vocab_size, int(to_random.sum()))
    return masked, targets, positions


def mask_batch(sequences: np.ndarray, rng: np.random.Generator, mask_rate: float = 0.15,
               policy: MaskPolicy = MaskPolicy(), vocab_size: int = 256) -> MlmBatch:
    """Mask every sequence of a batch ([CLS] protected) into one MlmBatch."""
    sequences = np.asarray(sequences)
    seq_len = sequences.shape[1]
    masked_rows, targets, positions = [], [], []
    for row, seq in enumerate(sequences):
        masked, tgt, pos = mask_tokens(seq, rng, mask_rate, policy, vocab_size, protected=(0,))
        masked_rows.append(masked)
        targets.append(tgt)
        positions.append(pos + row * seq_len)
    return MlmBatch(np.stack(masked_rows), np.concatenate(targets), np.concatenate(positions))


# ---------------------------------------------------------------------------
# Baselines, subsets, export
# ---------------------------------------------------------------------------

def majority_label(dataset: TaskDataset) -> int:
    if len(dataset) == 0:
        raise StabilityValidationError("majority baseline of an empty dataset")
    return int(np.argmax(np.bincount(dataset.labels, minlength=dataset.num_classes)))


def majority_baseline(dataset: TaskDataset, train: Optional[TaskDataset] = None) -> float:
    """
    Metric of the constant most-frequent-label classifier on ``dataset``.

    The majority label comes from ``train`` when given, else from
    ``dataset`` itself. Ties go to the lowest label id, so a balanced
    binary split predicts label 0 and its F1 baseline is 0; an F1
    baseline of 2/3 on a balanced dev split needs a positive majority
    in ``train``.

    Raises:
        StabilityValidationError: Empty dataset
    """
    from .metrics import task_metric

    label = majority_label(train if train is not None else dataset)
    if len(dataset) == 0:
        raise StabilityValidationError("majority baseline of an empty dataset")
    predictions = np.full(len(dataset), label, dtype=np.int64)
    return task_metric(dataset.metric, predictions, dataset.labels, dataset.num_classes)


def downsample(dataset: TaskDataset, n: int, seed: int) -> TaskDataset:
    """
    Uniform sample of n examples without replacement.

    Raises:
        StabilityValidationError: If n exceeds the dataset size
    """
    ensure_count("n", n)
    if n > len(dataset):
        raise StabilityValidationError(f"cannot sample {n} examples from {len(dataset)}")
    index = RngStream(seed).split("sampling").generator.choice(len(dataset), size=n, replace=False)
    return TaskDataset(dataset.tokens[index].copy(), dataset.labels[index].copy(),
                       dataset.num_classes, dataset.split, dataset.metric, dataset.name)


def export_csv(dataset: TaskDataset, path: Union[str, Path]) -> Path:
    """Write ``tokens,label`` rows with space-separated token ids."""
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["tokens", "label"])
        for tokens, label in zip(dataset.tokens, dataset.labels):
            writer.writerow([" ".join(str(int(t)) for t in tokens), int(label)])
    return path


def unigram_entropy(corpus: Corpus) -> float:
    """Empirical unigram entropy (nats) of all tokens in a corpus."""
    counts = np.bincount(corpus.sequences.ravel(), minlength=corpus.vocab_size).astype(np.float64)
    probs = counts[counts > 0] / counts.sum()
    return float(-(probs * np.log(probs)).sum())


def dataset_profile(name: str, scale: float = 1.0) -> Dict[str, Any]:
    """
    Sizes, class balance and metric of a bundled dataset profile.

    ``scale`` shrinks both splits (minimum one example each).

    Raises:
        StabilityValidationError: Unknown profile or non-positive scale
    """
    from .optim import load_presets

    profiles = load_presets()["datasets"]
    if name not in profiles:
        raise StabilityValidationError(f"unknown dataset profile {name!r}; known: {sorted(profiles)}")
    if not scale > 0:
        raise StabilityValidationError(f"scale must be > 0, got {scale}")
    profile = dict(profiles[name])
    profile["train_size"] = max(1, int(round(profile["train_size"] * scale)))
    profile["dev_size"] = max(1, int(round(profile["dev_size"] * scale)))
    profile["class_balance"] = tuple(profile["class_balance"])
    return profile
