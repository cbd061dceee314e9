"""Gradient checks for the tape-based autodiff and the toy encoder."""

import numpy as np
import pytest

from stablefit.core import autodiff as ad
from stablefit.core.autodiff import Tape, Tensor, backward, finite_difference_check, value_and_grad
from stablefit.core.model import ClassifyBatch, forward_classify, init_params
from stablefit.core.params import ParamStore
from stablefit.core.rng import RngStream
from stablefit.core.types import Mode
from stablefit.core.validate import NonFiniteError, StabilityValidationError

TOLERANCE = 1e-6


def random_store(seed, **shapes):
    gen = RngStream(seed).split("test").generator
    return ParamStore((name, gen.standard_normal(shape)) for name, shape in shapes.items())


def weights(seed, shape):
    return Tensor(RngStream(seed).split("weights").generator.standard_normal(shape))


def weighted_sum(x, seed=99):
    return ad.reduce_sum(ad.mul(x, weights(seed, x.shape)))


PRIMITIVE_CASES = {
    "matmul": (dict(a=(3, 4), b=(4, 2)), lambda w: weighted_sum(ad.matmul(w["a"], w["b"]))),
    "batched-matmul": (dict(a=(2, 3, 4), b=(2, 4, 3)), lambda w: weighted_sum(ad.matmul(w["a"], w["b"]))),
    "add-broadcast": (dict(a=(3, 4), b=(4,)), lambda w: weighted_sum(ad.add(w["a"], w["b"]))),
    "mul": (dict(a=(3, 4), b=(3, 4)), lambda w: weighted_sum(ad.mul(w["a"], w["b"]))),
    "scale": (dict(a=(5,)), lambda w: weighted_sum(ad.scale(w["a"], 0.37))),
    "softmax": (dict(a=(3, 5)), lambda w: weighted_sum(ad.softmax(w["a"]))),
    "gelu": (dict(a=(4, 3)), lambda w: weighted_sum(ad.gelu(w["a"]))),
    "tanh": (dict(a=(4, 3)), lambda w: weighted_sum(ad.tanh(w["a"]))),
    "layer_norm": (dict(x=(3, 6), g=(6,), o=(6,)),
                   lambda w: weighted_sum(ad.layer_norm(w["x"], w["g"], w["o"]))),
    "embedding": (dict(t=(5, 3)), lambda w: weighted_sum(ad.embedding(w["t"], np.array([[0, 2], [2, 4]])))),
    "take_rows": (dict(a=(6, 3)), lambda w: weighted_sum(ad.take_rows(w["a"], np.array([1, 1, 5])))),
    "cross_entropy": (dict(a=(4, 3)), lambda w: ad.cross_entropy(w["a"], np.array([0, 2, 1, 2]))),
    "mean-axis": (dict(a=(3, 4)), lambda w: weighted_sum(ad.reduce_mean(w["a"], axis=1))),
    "reshape": (dict(a=(2, 6)), lambda w: weighted_sum(ad.reshape(w["a"], (3, 4)))),
    "transpose": (dict(a=(2, 3, 4)), lambda w: weighted_sum(ad.transpose(w["a"], (2, 0, 1)))),
    "dropout": (dict(a=(4, 4)),
                lambda w: weighted_sum(ad.dropout(w["a"], 0.3, RngStream(5).split("dropout").generator))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_central_differences(name):
    shapes, build = PRIMITIVE_CASES[name]
    params = random_store(len(name), **shapes)

    def loss_fn(p):
        return build(ad.bind(p))

    assert finite_difference_check(loss_fn, params, samples=200, step=1e-5) < TOLERANCE


def tiny_classifier(tiny_config, tiny_task):
    config = tiny_config.with_heads(("classifier",))
    gen = RngStream(11).split("test", "widen").generator

    def widen(name, arr):
        # Larger weights than the default init keep sampled gradients away from zero.
        if arr.ndim == 2:
            return arr * 10.0
        return arr + 0.1 * gen.standard_normal(arr.shape)

    params = init_params(config, seed=0).map(widen)
    train, _ = tiny_task
    return config, params, train.batch(np.arange(8))


def test_toy_encoder_gradient_check(tiny_config, tiny_task):
    config, params, batch = tiny_classifier(tiny_config, tiny_task)
    # The key bias only shifts every attention score of a row equally, so its gradient is exactly zero.
    checked = params.select(lambda name: not name.endswith("attention.key.bias"))

    def loss_fn(p):
        return forward_classify(params.replace(p), config, batch, Mode.EVAL).loss

    assert finite_difference_check(loss_fn, checked, samples=200, step=1e-5) < TOLERANCE


def test_finite_difference_check_leaves_params_untouched(tiny_config, tiny_task):
    config, params, batch = tiny_classifier(tiny_config, tiny_task)
    before = params.copy()
    finite_difference_check(lambda p: forward_classify(p, config, batch).loss, params, samples=20)
    assert params.equal(before)


def test_finite_difference_check_rejects_nondeterministic_loss():
    params = random_store(0, a=(3,))
    gen = np.random.default_rng(0)

    def noisy(p):
        return float(np.sum(p["a"])) + gen.random()

    with pytest.raises(StabilityValidationError):
        finite_difference_check(noisy, params)


def test_finite_difference_check_empty_store():
    assert finite_difference_check(lambda p: 0.0, ParamStore()) == 0.0


def test_unused_leaves_get_zero_gradients():
    params = random_store(1, used=(3,), unused=(2, 2))
    loss, grads = value_and_grad(lambda p: ad.reduce_sum(ad.bind(p)["used"]), params)
    assert loss == pytest.approx(float(np.sum(params["used"])))
    np.testing.assert_array_equal(grads["used"], np.ones(3))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))


def test_shared_leaf_accumulates():
    params = random_store(2, a=(4,))
    _, grads = value_and_grad(lambda p: ad.reduce_sum(ad.mul(ad.bind(p)["a"], ad.bind(p)["a"])), params)
    np.testing.assert_allclose(grads["a"], 2.0 * params["a"])


def test_no_grad_records_nothing():
    params = random_store(3, a=(2, 2))
    with Tape() as tape:
        with ad.no_grad():
            ad.reduce_sum(ad.bind(params)["a"])
    assert tape.entries == []


def test_backward_requires_scalar():
    params = random_store(4, a=(2, 2))
    with Tape() as tape:
        out = ad.tanh(ad.bind(params)["a"])
    with pytest.raises(StabilityValidationError):
        backward(out, tape)


def test_shape_violation_raises():
    with pytest.raises(StabilityValidationError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_non_finite_output_raises():
    with pytest.raises(NonFiniteError):
        ad.mul(Tensor(np.array([np.inf])), Tensor(np.array([1.0])))


def test_dropout_requires_generator():
    with pytest.raises(StabilityValidationError):
        ad.dropout(Tensor(np.ones(3)), 0.1, None)


def test_cross_entropy_target_range():
    with pytest.raises(StabilityValidationError):
        ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_eval_forward_is_deterministic(tiny_config, tiny_task):
    config, params, batch = tiny_classifier(tiny_config, tiny_task)
    first = forward_classify(params, config, batch, Mode.EVAL)
    second = forward_classify(params, config, batch, Mode.EVAL)
    assert float(first.loss.data) == float(second.loss.data)


def test_classify_batch_helper_shape(tiny_task):
    train, _ = tiny_task
    batch = train.batch(np.arange(4))
    assert isinstance(batch, ClassifyBatch)
    assert batch.tokens.shape[0] == 4
