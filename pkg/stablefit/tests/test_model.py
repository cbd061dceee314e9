"""Tests for the encoder forward passes and layer substitution."""

import math

import numpy as np
import pytest

from stablefit.core.model import (
    ClassifyBatch,
    expected_param_shapes,
    forward_classify,
    forward_mlm,
    init_checkpoint,
    init_params,
    substitute_top_layers,
)
from stablefit.core.params import layer_index
from stablefit.core.rng import RngStream
from stablefit.core.training import held_out_batches, mlm_loss
from stablefit.core.types import Mode
from stablefit.core.validate import StabilityValidationError, validate_checkpoint


@pytest.fixture
def fine_tuned(tiny_config):
    return init_checkpoint(tiny_config.with_heads(("classifier",)), seed=1, provenance="ft")


@pytest.fixture
def pre_trained(tiny_config):
    return init_checkpoint(tiny_config.with_heads(("mlm",)), seed=0, provenance="pt")


def encoder_names(config):
    return [n for n in expected_param_shapes(config) if not n.startswith(("mlm_head", "pooler", "classifier"))]


def test_init_is_deterministic_and_valid(tiny_config):
    a = init_checkpoint(tiny_config, seed=5)
    b = init_checkpoint(tiny_config, seed=5)
    assert a.params.equal(b.params)
    assert validate_checkpoint(a) == []
    assert not a.params.equal(init_checkpoint(tiny_config, seed=6).params)


def test_head_init_matches_full_init(tiny_config):
    full = init_params(tiny_config, seed=3)
    head = init_params(tiny_config, seed=3, heads=("classifier",))
    assert set(head) == {"pooler.weight", "pooler.bias", "classifier.weight", "classifier.bias"}
    for name in head:
        np.testing.assert_array_equal(head[name], full[name])


def test_untrained_classifier_loss_near_ln2(tiny_checkpoint, tiny_task):
    train, _ = tiny_task
    out = forward_classify(tiny_checkpoint.params, tiny_checkpoint.config, train.batch(np.arange(16)))
    assert abs(float(out.loss.data) - math.log(2)) < 0.2
    assert out.logits.shape == (16, 2)


def test_eval_mode_is_bitwise_repeatable(tiny_checkpoint, tiny_task):
    train, _ = tiny_task
    batch = train.batch(np.arange(8))
    first = forward_classify(tiny_checkpoint.params, tiny_checkpoint.config, batch, Mode.EVAL)
    second = forward_classify(tiny_checkpoint.params, tiny_checkpoint.config, batch, Mode.EVAL)
    assert float(first.loss.data) == float(second.loss.data)


def test_train_mode_dropout_follows_stream(tiny_config, tiny_task):
    config = tiny_config.replace(dropout_p=0.3)
    params = init_params(config, seed=0)
    batch = tiny_task[0].batch(np.arange(8))
    a = forward_classify(params, config, batch, Mode.TRAIN, RngStream(1).split("dropout", 0))
    b = forward_classify(params, config, batch, Mode.TRAIN, RngStream(1).split("dropout", 0))
    c = forward_classify(params, config, batch, Mode.TRAIN, RngStream(1).split("dropout", 1))
    assert float(a.loss.data) == float(b.loss.data)
    assert float(a.loss.data) != float(c.loss.data)


def test_out_of_range_tokens_rejected(tiny_checkpoint):
    tokens = np.full((2, 6), tiny_checkpoint.config.vocab_size)
    with pytest.raises(StabilityValidationError):
        forward_classify(tiny_checkpoint.params, tiny_checkpoint.config, ClassifyBatch(tokens, np.zeros(2, int)))


def test_uniform_logits_give_vocab_perplexity(tiny_config, tiny_corpus):
    config = tiny_config.with_heads(("mlm",))
    params = init_params(config, seed=0)
    params = params.replace({"embeddings.token": np.zeros_like(params["embeddings.token"])})
    batch = held_out_batches(tiny_corpus, config, 0.15, RngStream(0).split("mask"))[0]
    out = forward_mlm(params, config, batch)
    assert out.perplexity == pytest.approx(config.vocab_size, rel=1e-9)
    assert out.perplexity == math.exp(float(out.loss.data))


def test_mlm_rejects_empty_mask(tiny_checkpoint, tiny_corpus):
    from stablefit.core.model import MlmBatch

    batch = MlmBatch(tiny_corpus.sequences[:2], np.zeros(0, int), np.zeros(0, int))
    with pytest.raises(StabilityValidationError):
        forward_mlm(tiny_checkpoint.params, tiny_checkpoint.config, batch)


def test_substitute_zero_keeps_fine_tuned_encoder(fine_tuned, pre_trained):
    hybrid = substitute_top_layers(fine_tuned, pre_trained, 0)
    for name in encoder_names(fine_tuned.config):
        np.testing.assert_array_equal(hybrid.params[name], fine_tuned.params[name])
    assert hybrid.config.heads == ("mlm", "classifier")
    np.testing.assert_array_equal(hybrid.params["mlm_head.bias"], pre_trained.params["mlm_head.bias"])
    np.testing.assert_array_equal(hybrid.params["classifier.weight"], fine_tuned.params["classifier.weight"])


def test_substitute_one_restores_only_top_layer(fine_tuned, pre_trained):
    top = fine_tuned.config.num_layers - 1
    hybrid = substitute_top_layers(fine_tuned, pre_trained, 1)
    for name in encoder_names(fine_tuned.config):
        source = pre_trained if layer_index(name) == top else fine_tuned
        np.testing.assert_array_equal(hybrid.params[name], source.params[name])


def test_substitute_all_matches_pre_trained_mlm_loss(fine_tuned, pre_trained, tiny_corpus):
    hybrid = substitute_top_layers(fine_tuned, pre_trained, pre_trained.config.num_layers)
    batches = held_out_batches(tiny_corpus, pre_trained.config, 0.15, RngStream(2).split("mask", "probe"))
    assert mlm_loss(hybrid.params, hybrid.config, batches) == mlm_loss(pre_trained.params, pre_trained.config,
                                                                       batches)


def test_substitution_is_idempotent_and_pure(fine_tuned, pre_trained):
    before_ft, before_pt = fine_tuned.hash(), pre_trained.hash()
    once = substitute_top_layers(fine_tuned, pre_trained, 1)
    twice = substitute_top_layers(once, pre_trained, 1)
    assert once.params.equal(twice.params)
    assert set(once.params) == set(substitute_top_layers(fine_tuned, pre_trained, 2).params)
    assert fine_tuned.hash() == before_ft
    assert pre_trained.hash() == before_pt


@pytest.mark.parametrize("k", [-1, 3, 1.0])
def test_substitute_rejects_bad_k(fine_tuned, pre_trained, k):
    with pytest.raises(StabilityValidationError):
        substitute_top_layers(fine_tuned, pre_trained, k)


def test_substitute_rejects_architecture_mismatch(fine_tuned, tiny_config):
    other = init_checkpoint(tiny_config.replace(num_layers=3).with_heads(("mlm",)), seed=0)
    with pytest.raises(StabilityValidationError):
        substitute_top_layers(fine_tuned, other, 1)
