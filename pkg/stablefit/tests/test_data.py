"""Tests for synthetic corpora, tasks, masking and baselines."""

import math

import numpy as np
import pytest

from stablefit.core.data import (
    GrammarSpec,
    MaskPolicy,
    TaskDataset,
    TaskSpec,
    dataset_profile,
    downsample,
    expected_mask_count,
    export_csv,
    generate_classification_task,
    generate_corpus,
    majority_baseline,
    mask_tokens,
    unigram_entropy,
)
from stablefit.core.model import CLS_TOKEN, MASK_TOKEN
from stablefit.core.validate import StabilityValidationError


def labelled(labels, metric="accuracy", split="dev"):
    labels = np.asarray(labels, dtype=np.int64)
    tokens = np.tile(np.arange(len(labels))[:, None] + 2, (1, 3))
    return TaskDataset(tokens, labels, 2, split, metric)


def test_corpus_is_deterministic(tiny_grammar):
    a = generate_corpus(tiny_grammar, seed=3, size=20)
    b = generate_corpus(tiny_grammar, seed=3, size=20)
    assert a.hash() == b.hash()
    assert a.hash() != generate_corpus(tiny_grammar, seed=4, size=20).hash()


def test_corpus_shape_and_vocab(tiny_grammar):
    corpus = generate_corpus(tiny_grammar, seed=0, size=1)
    assert corpus.sequences.shape == (1, tiny_grammar.seq_len)
    assert corpus.sequences[0, 0] == CLS_TOKEN
    assert corpus.sequences.max() < tiny_grammar.vocab_size


def test_corpus_entropy_below_uniform():
    spec = GrammarSpec()
    corpus = generate_corpus(spec, seed=0, size=200)
    assert unigram_entropy(corpus) < math.log(spec.vocab_size)


def test_corpus_rejects_empty(tiny_grammar):
    with pytest.raises(StabilityValidationError):
        generate_corpus(tiny_grammar, seed=0, size=0)


def test_expected_mask_count():
    assert expected_mask_count(32, 0.15) == pytest.approx(4.8)


def test_mask_tokens_is_deterministic():
    sequence = np.arange(2, 34)
    first = mask_tokens(sequence, np.random.default_rng(5), vocab_size=64)
    second = mask_tokens(sequence, np.random.default_rng(5), vocab_size=64)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)


def test_mask_tokens_targets_are_originals():
    sequence = np.arange(2, 34)
    masked, targets, positions = mask_tokens(sequence, np.random.default_rng(1), 0.5, vocab_size=64)
    np.testing.assert_array_equal(targets, sequence[positions])
    untouched = np.setdiff1d(np.arange(len(sequence)), positions)
    np.testing.assert_array_equal(masked[untouched], sequence[untouched])


def test_mask_tokens_select_all_with_full_mask_policy():
    sequence = np.arange(2, 12)
    masked, _, positions = mask_tokens(sequence, np.random.default_rng(0), policy=MaskPolicy(1.0, 0.0, 0.0),
                                       vocab_size=16, protected=(0,), select_all=True)
    np.testing.assert_array_equal(positions, np.arange(1, 10))
    assert masked[0] == sequence[0]
    assert np.all(masked[1:] == MASK_TOKEN)


def test_mask_tokens_forces_one_position():
    _, targets, positions = mask_tokens(np.arange(2, 10), np.random.default_rng(0), 1e-12, vocab_size=16)
    assert len(positions) == 1
    assert len(targets) == 1


@pytest.mark.parametrize("rate", [0.0, 1.0, -0.1])
def test_mask_tokens_rejects_rate(rate):
    with pytest.raises(StabilityValidationError):
        mask_tokens(np.arange(5), np.random.default_rng(0), rate)


def test_mask_policy_must_sum_to_one():
    with pytest.raises(StabilityValidationError):
        MaskPolicy(0.8, 0.1, 0.2)


def test_task_is_deterministic_and_disjoint(tiny_grammar):
    spec = TaskSpec(grammar=tiny_grammar)
    train, dev = generate_classification_task(spec, seed=7, train_size=60, dev_size=30)
    again, _ = generate_classification_task(spec, seed=7, train_size=60, dev_size=30)
    assert train.hash() == again.hash()
    assert len(train) == 60 and len(dev) == 30
    assert {row.tobytes() for row in train.tokens}.isdisjoint(row.tobytes() for row in dev.tokens)
    assert train.labels.max() < train.num_classes


def test_default_task_class_balance():
    profile = dataset_profile("rte")
    train, _ = generate_classification_task(TaskSpec(), seed=0, train_size=profile["train_size"], dev_size=50)
    majority = np.bincount(train.labels).max() / len(train)
    assert abs(majority - 0.53) <= 0.03


def test_task_rejects_bad_balance(tiny_grammar):
    with pytest.raises(StabilityValidationError):
        TaskSpec(grammar=tiny_grammar, class_balance=(0.6, 0.6))


def test_majority_baseline_accuracy():
    assert majority_baseline(labelled([1, 1, 0])) == pytest.approx(2 / 3)


def test_majority_baseline_mcc_is_zero():
    assert majority_baseline(labelled([1, 1, 0, 1], metric="mcc")) == 0.0
    assert majority_baseline(labelled([0, 1], metric="mcc")) == 0.0


def test_majority_baseline_f1_with_positive_majority():
    train = labelled([1, 1, 0], metric="f1", split="train")
    dev = labelled([1, 0, 1, 0], metric="f1")
    assert majority_baseline(dev, train) == pytest.approx(2 / 3)


def test_majority_baseline_tie_goes_to_label_zero():
    balanced = labelled([1, 0, 0, 1], metric="f1", split="train")
    dev = labelled([1, 0, 1, 0], metric="f1")
    assert majority_baseline(dev, balanced) == 0.0
    assert majority_baseline(labelled([1, 0, 0, 1])) == pytest.approx(0.5)


def test_majority_baseline_rejects_empty():
    empty = TaskDataset(np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64), 2, "dev", "accuracy")
    with pytest.raises(StabilityValidationError):
        majority_baseline(empty)


def test_downsample_full_size_is_permutation(tiny_task):
    train, _ = tiny_task
    sample = downsample(train, len(train), seed=0)
    original = sorted(row.tobytes() + bytes([label]) for row, label in zip(train.tokens, train.labels))
    sampled = sorted(row.tobytes() + bytes([label]) for row, label in zip(sample.tokens, sample.labels))
    assert original == sampled


def test_downsample_size_and_seeds(tiny_task):
    train, _ = tiny_task
    a = downsample(train, 20, seed=0)
    b = downsample(train, 20, seed=1)
    assert len(a) == 20
    assert a.hash() != b.hash()
    assert a.hash() == downsample(train, 20, seed=0).hash()


def test_downsample_rejects_oversize(tiny_task):
    train, _ = tiny_task
    with pytest.raises(StabilityValidationError):
        downsample(train, len(train) + 1, seed=0)


def test_export_csv(tmp_path):
    path = export_csv(labelled([1, 0]), tmp_path / "dev.csv")
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines == ["tokens,label", "2 2 2,1", "3 3 3,0"]


def test_dataset_profile_scaling():
    profile = dataset_profile("cola", scale=0.1)
    assert profile["train_size"] == 855
    assert profile["metric"] == "mcc"
    with pytest.raises(StabilityValidationError):
        dataset_profile("wikitext")
