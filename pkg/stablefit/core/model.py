"""
Toy BERT-style encoder.

Embeddings (token + learned position, layer norm), a stack of post-norm
transformer blocks, a tanh pooler over the first position with a linear
classifier, and a masked-LM head whose decoder is tied to the token
embedding. All forward functions take a ParamStore and build their graph
through the autodiff primitives, so the same code serves training (under a
Tape) and evaluation.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .params import ParamStore, layer_index
from .rng import RngStream
from .types import HEAD_ORDER, Checkpoint, Mode, ModelConfig
from .validate import (
    StabilityValidationError,
    ensure_checkpoint,
    ensure_same_architecture,
    ensure_token_range,
    validate_model_config,
)

INIT_STD = 0.02
CLS_TOKEN = 0
MASK_TOKEN = 1
NUM_SPECIAL_TOKENS = 2


@dataclass
class ClassifyBatch:
    tokens: np.ndarray
    labels: np.ndarray


@dataclass
class MlmBatch:
    """
    Masked-LM batch.

    Attributes:
        tokens: Masked token matrix (B x S)
        targets: Original tokens at the selected positions (M,)
        positions: Flat indices b*S + s of the selected positions (M,)
    """
    tokens: np.ndarray
    targets: np.ndarray
    positions: np.ndarray


@dataclass
class ClassifyOutput:
    loss: Tensor
    logits: np.ndarray
    correct: int

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits, axis=-1)


@dataclass
class MlmOutput:
    loss: Tensor
    perplexity: float


def expected_param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical parameter names and shapes implied by a config, in order."""
    h, f, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    shapes: Dict[str, Tuple[int, ...]] = {
        "embeddings.token": (v, h),
        "embeddings.position": (config.max_seq_len, h),
        "embeddings.ln.gain": (h,),
        "embeddings.ln.offset": (h,),
    }
    for i in range(config.num_layers):
        p = f"layer{i}"
        for proj in ("query", "key", "value"):
            shapes[f"{p}.attention.{proj}.weight"] = (h, h)
            shapes[f"{p}.attention.{proj}.bias"] = (h,)
        shapes[f"{p}.attention.output.dense.weight"] = (h, h)
        shapes[f"{p}.attention.output.dense.bias"] = (h,)
        shapes[f"{p}.ln1.gain"] = (h,)
        shapes[f"{p}.ln1.offset"] = (h,)
        shapes[f"{p}.ffn.in.weight"] = (h, f)
        shapes[f"{p}.ffn.in.bias"] = (f,)
        shapes[f"{p}.ffn.out.weight"] = (f, h)
        shapes[f"{p}.ffn.out.bias"] = (h,)
        shapes[f"{p}.ln2.gain"] = (h,)
        shapes[f"{p}.ln2.offset"] = (h,)
    if "mlm" in config.heads:
        shapes["mlm_head.transform.weight"] = (h, h)
        shapes["mlm_head.transform.bias"] = (h,)
        shapes["mlm_head.ln.gain"] = (h,)
        shapes["mlm_head.ln.offset"] = (h,)
        shapes["mlm_head.bias"] = (v,)
    if "classifier" in config.heads:
        shapes["pooler.weight"] = (h, h)
        shapes["pooler.bias"] = (h,)
        shapes["classifier.weight"] = (h, config.num_classes)
        shapes["classifier.bias"] = (config.num_classes,)
    return shapes


def head_of(name: str) -> Optional[str]:
    """Task head owning a parameter, or None for encoder parameters."""
    top = name.split(".", 1)[0]
    if top == "mlm_head":
        return "mlm"
    if top in ("pooler", "classifier"):
        return "classifier"
    return None


def _init_tensor(name: str, shape: Tuple[int, ...], stream: RngStream, dtype: np.dtype) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gain":
        return np.ones(shape, dtype=dtype)
    if leaf in ("bias", "offset"):
        return np.zeros(shape, dtype=dtype)
    gen = stream.split(name).generator
    values = gen.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while outside.any():
        values[outside] = gen.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return (values * INIT_STD).astype(dtype)


def init_params(config: ModelConfig, seed: int, heads: Optional[Tuple[str, ...]] = None) -> ParamStore:
    """
    Initialize parameters deterministically.

    Weights come from a normal with std 0.02 truncated at two standard
    deviations; biases and layer-norm offsets are zero and gains are one.
    Each tensor draws from its own stream (``init/<name>``), so a head
    initialized alone matches the same head inside a full initialization.

    Args:
        config: Model configuration
        seed: Root seed
        heads: Restrict to the parameters of these heads only (no encoder)

    Raises:
        StabilityValidationError: If the config is invalid
    """
    errors = validate_model_config(config)
    if errors:
        raise StabilityValidationError(f"invalid model config: {errors}")
    stream = RngStream(seed).split("init")
    params = ParamStore()
    for name, shape in expected_param_shapes(config).items():
        if heads is not None and head_of(name) not in heads:
            continue
        params.add(name, _init_tensor(name, shape, stream, config.np_dtype))
    return params


def init_checkpoint(config: ModelConfig, seed: int, provenance: str = "init") -> Checkpoint:
    return Checkpoint(config, init_params(config, seed), provenance)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _dense(x: Tensor, w: Dict[str, Tensor], prefix: str) -> Tensor:
    return ad.add(ad.matmul(x, w[f"{prefix}.weight"]), w[f"{prefix}.bias"])


def _norm(x: Tensor, w: Dict[str, Tensor], prefix: str) -> Tensor:
    return ad.layer_norm(x, w[f"{prefix}.gain"], w[f"{prefix}.offset"])


class _Dropout:
    """Applies dropout only in train mode; every call draws from one generator."""

    def __init__(self, p: float, mode: Mode, rng: Optional[RngStream]):
        self.active = mode == Mode.TRAIN and p > 0.0
        self.p = p
        if self.active and rng is None:
            raise StabilityValidationError("train-mode forward requires an RNG stream for dropout")
        self.gen = rng.generator if self.active else None

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dropout(x, self.p, self.gen) if self.active else x


def _split_heads(x: Tensor, batch: int, seq: int, config: ModelConfig) -> Tensor:
    x = ad.reshape(x, (batch, seq, config.num_heads, config.head_dim))
    return ad.transpose(x, (0, 2, 1, 3))


def _encoder_layer(x: Tensor, w: Dict[str, Tensor], i: int, config: ModelConfig, drop: _Dropout) -> Tensor:
    batch, seq, hidden = x.shape
    p = f"layer{i}"
    q = _split_heads(_dense(x, w, f"{p}.attention.query"), batch, seq, config)
    k = _split_heads(_dense(x, w, f"{p}.attention.key"), batch, seq, config)
    v = _split_heads(_dense(x, w, f"{p}.attention.value"), batch, seq, config)

    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(config.head_dim))
    probs = drop(ad.softmax(scores))
    context = ad.transpose(ad.matmul(probs, v), (0, 2, 1, 3))
    context = ad.reshape(context, (batch, seq, hidden))

    attended = drop(_dense(context, w, f"{p}.attention.output.dense"))
    x = _norm(ad.add(x, attended), w, f"{p}.ln1")

    inner = ad.gelu(_dense(x, w, f"{p}.ffn.in"))
    out = drop(_dense(inner, w, f"{p}.ffn.out"))
    return _norm(ad.add(x, out), w, f"{p}.ln2")


def encode(params: ParamStore, config: ModelConfig, tokens: np.ndarray,
           mode: Mode = Mode.EVAL, rng: Optional[RngStream] = None) -> Tuple[Tensor, Dict[str, Tensor]]:
    """Run embeddings and the encoder stack; returns (hidden B x S x H, bound params)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise StabilityValidationError(f"tokens must be a B x S matrix, got shape {tokens.shape}")
    ensure_token_range(tokens, config.vocab_size, config.max_seq_len)
    mode = Mode(mode)
    w = ad.bind(params)
    drop = _Dropout(config.dropout_p, mode, rng)

    seq = tokens.shape[1]
    x = ad.embedding(w["embeddings.token"], tokens)
    x = ad.add(x, ad.embedding(w["embeddings.position"], np.arange(seq)))
    x = drop(_norm(x, w, "embeddings.ln"))
    for i in range(config.num_layers):
        x = _encoder_layer(x, w, i, config, drop)
    return x, w


def forward_classify(params: ParamStore, config: ModelConfig, batch: ClassifyBatch,
                     mode: Mode = Mode.EVAL, rng: Optional[RngStream] = None) -> ClassifyOutput:
    """
    Classification loss through the pooler and classifier head.

    The pooler applies tanh to a dense projection of the first-position
    hidden state. Loss is the mean cross-entropy over the batch.

    Raises:
        StabilityValidationError: Out-of-range token ids or labels, or a
            missing classifier head
    """
    if "classifier" not in config.heads:
        raise StabilityValidationError("forward_classify requires the classifier head")
    hidden, w = encode(params, config, batch.tokens, mode, rng)
    b, s, h = hidden.shape
    first = ad.take_rows(ad.reshape(hidden, (b * s, h)), np.arange(b) * s)
    pooled = ad.tanh(_dense(first, w, "pooler"))
    logits = _dense(pooled, w, "classifier")
    labels = np.asarray(batch.labels)
    loss = ad.cross_entropy(logits, labels)
    correct = int(np.sum(np.argmax(logits.data, axis=-1) == labels))
    return ClassifyOutput(loss=loss, logits=logits.data, correct=correct)


def forward_mlm(params: ParamStore, config: ModelConfig, batch: MlmBatch,
                mode: Mode = Mode.EVAL, rng: Optional[RngStream] = None) -> MlmOutput:
    """
    Masked-LM loss over the selected positions only.

    The decoder reuses the token embedding matrix (transposed) plus the
    learned ``mlm_head.bias``.

    Raises:
        StabilityValidationError: No masked positions, or missing MLM head
    """
    if "mlm" not in config.heads:
        raise StabilityValidationError("forward_mlm requires the mlm head")
    positions = np.asarray(batch.positions)
    if positions.size == 0:
        raise StabilityValidationError("forward_mlm: batch has zero masked positions")
    hidden, w = encode(params, config, batch.tokens, mode, rng)
    b, s, h = hidden.shape
    selected = ad.take_rows(ad.reshape(hidden, (b * s, h)), positions)
    transformed = _norm(ad.gelu(_dense(selected, w, "mlm_head.transform")), w, "mlm_head.ln")
    decoder = ad.transpose(w["embeddings.token"], (1, 0))
    logits = ad.add(ad.matmul(transformed, decoder), w["mlm_head.bias"])
    loss = ad.cross_entropy(logits, batch.targets)
    return MlmOutput(loss=loss, perplexity=math.exp(float(loss.data)))


def predict(params: ParamStore, config: ModelConfig, tokens: np.ndarray, labels: np.ndarray,
            chunk_size: int = 256) -> Tuple[np.ndarray, float]:
    """Eval-mode predictions over a full split; returns (predictions, mean loss)."""
    preds = []
    total = 0.0
    with ad.no_grad():
        for start in range(0, len(tokens), chunk_size):
            batch = ClassifyBatch(tokens[start:start + chunk_size], labels[start:start + chunk_size])
            out = forward_classify(params, config, batch, Mode.EVAL)
            preds.append(out.predictions)
            total += float(out.loss.data) * len(batch.labels)
    return np.concatenate(preds), total / len(tokens)


# ---------------------------------------------------------------------------
# Layer substitution
# ---------------------------------------------------------------------------

def substitute_top_layers(fine_tuned: Checkpoint, pre_trained: Checkpoint, k: int) -> Checkpoint:
    """
    Restore the top-k encoder layers of a fine-tuned checkpoint.

    Layers num_layers-k .. num_layers-1 come from ``pre_trained``; for
    k = num_layers the embeddings are restored too. The result carries the
    union of both checkpoints' heads: the MLM head is the fine-tuned one
    only when both have it, otherwise the pre-trained one; the classifier
    head (pooler included) prefers the fine-tuned one.

    Args:
        fine_tuned: Checkpoint after task training
        pre_trained: Checkpoint before task training
        k: Number of top layers to restore, 0 <= k <= num_layers

    Returns:
        New Checkpoint; inputs are not modified

    Raises:
        StabilityValidationError: Architecture mismatch or k out of range
    """
    ensure_same_architecture(fine_tuned, pre_trained, "substitute_top_layers")
    ensure_checkpoint(fine_tuned, "substitute_top_layers")
    ensure_checkpoint(pre_trained, "substitute_top_layers")
    num_layers = fine_tuned.config.num_layers
    if not isinstance(k, (int, np.integer)) or not 0 <= k <= num_layers:
        raise StabilityValidationError(f"k must lie in [0, {num_layers}], got {k}")

    heads = tuple(h for h in HEAD_ORDER if h in fine_tuned.config.heads or h in pre_trained.config.heads)
    config = fine_tuned.config.with_heads(heads)
    if "classifier" not in fine_tuned.config.heads:
        config = config.replace(num_classes=pre_trained.config.num_classes)
    first_restored = num_layers - k

    params = ParamStore()
    for name in expected_param_shapes(config):
        head = head_of(name)
        layer = layer_index(name)
        if head == "mlm":
            both = "mlm" in fine_tuned.config.heads and "mlm" in pre_trained.config.heads
            source = fine_tuned if both or "mlm" not in pre_trained.config.heads else pre_trained
        elif head == "classifier":
            source = fine_tuned if "classifier" in fine_tuned.config.heads else pre_trained
        elif layer is not None:
            source = pre_trained if layer >= first_restored else fine_tuned
        else:
            source = pre_trained if k == num_layers else fine_tuned
        params.add(name, source.params[name].copy())
    return Checkpoint(config, params, f"{fine_tuned.provenance}+top{k}:{pre_trained.provenance}")
