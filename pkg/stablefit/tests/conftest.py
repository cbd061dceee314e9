"""Shared fixtures and the slow-test gate."""

import os

import pytest

from stablefit.core.data import GrammarSpec, TaskSpec, generate_classification_task, generate_corpus
from stablefit.core.model import init_checkpoint
from stablefit.core.types import ModelConfig

RUN_SLOW_ENV = "STABLEFIT_RUN_SLOW"


def pytest_configure(config):
    config.addinivalue_line("markers", f"slow: long pinned-instance checks (set {RUN_SLOW_ENV}=1 to run)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get(RUN_SLOW_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"set {RUN_SLOW_ENV}=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_config():
    """Two-layer float64 encoder small enough for finite differences."""
    return ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, ffn_dim=16, vocab_size=16,
                       max_seq_len=6, dropout_p=0.0, num_classes=2, dtype="float64")


@pytest.fixture
def tiny_grammar(tiny_config):
    return GrammarSpec(vocab_size=tiny_config.vocab_size, seq_len=tiny_config.max_seq_len)


@pytest.fixture
def tiny_task(tiny_grammar):
    return generate_classification_task(TaskSpec(grammar=tiny_grammar), seed=7, train_size=48, dev_size=24)


@pytest.fixture
def tiny_corpus(tiny_grammar):
    return generate_corpus(tiny_grammar, seed=3, size=40, split="eval")


@pytest.fixture
def tiny_checkpoint(tiny_config):
    return init_checkpoint(tiny_config, seed=0)
