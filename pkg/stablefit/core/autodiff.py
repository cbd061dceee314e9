"""
Reverse-mode automatic differentiation over numpy arrays.

A Tape records primitive applications in execution order. Entering a Tape
(``with Tape() as tape:``) makes it the active tape for the current
context; ``apply_primitive`` records onto whichever tape is active and
records nothing otherwise. ``backward`` walks the entries in reverse and
returns one gradient per watched parameter name.

Primitives are registered by name with a shape rule, a forward kernel and
a backward kernel. Every forward output is checked for finiteness.
"""

import contextvars
import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .params import ParamStore, global_norm
from .rng import RngStream
from .validate import NonFiniteError, StabilityValidationError, ensure_shapes

logger = logging.getLogger(__name__)

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("stablefit_active_tape", default=None)


class Tensor:
    """An array plus the id of the tape node that produced it (None for constants)."""

    __slots__ = ("data", "node_id")

    def __init__(self, data: Any, node_id: Optional[int] = None):
        self.data = np.asarray(data)
        self.node_id = node_id

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, node={self.node_id})"


@dataclass
class TapeEntry:
    """One recorded primitive application."""
    op: str
    input_ids: Tuple[Optional[int], ...]
    output_id: int
    inputs: Tuple[np.ndarray, ...]
    output: np.ndarray
    cache: Any
    attrs: Dict[str, Any]


@dataclass
class Tape:
    """Ordered record of primitive applications plus the watched leaves."""
    entries: List[TapeEntry] = field(default_factory=list)
    leaves: Dict[str, Tensor] = field(default_factory=dict)
    _next_id: int = 0
    _token: Any = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc: Any) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def new_id(self) -> int:
        self._next_id += 1
        return self._next_id

    def watch(self, name: str, array: np.ndarray) -> Tensor:
        """Register a named leaf; watching the same name twice returns the same node."""
        if name in self.leaves:
            return self.leaves[name]
        leaf = Tensor(array, self.new_id())
        self.leaves[name] = leaf
        return leaf

    def watch_all(self, params: ParamStore) -> Dict[str, Tensor]:
        return {name: self.watch(name, arr) for name, arr in params.items()}


class no_grad:
    """Context manager that suspends recording on the active tape."""

    def __enter__(self) -> None:
        self._token = _ACTIVE_TAPE.set(None)

    def __exit__(self, *exc: Any) -> None:
        _ACTIVE_TAPE.reset(self._token)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def bind(params: ParamStore) -> Dict[str, Tensor]:
    """
    Wrap every parameter as a Tensor.

    Under an active tape every name is watched, so parameters that the loss
    never touches still receive (zero) gradients.
    """
    tape = active_tape()
    if tape is None:
        return {name: Tensor(arr) for name, arr in params.items()}
    return tape.watch_all(params)


# ---------------------------------------------------------------------------
# Primitive registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Primitive:
    name: str
    check: Callable[[Sequence[np.ndarray], Dict[str, Any]], None]
    forward: Callable[[Sequence[np.ndarray], Dict[str, Any]], Tuple[np.ndarray, Any]]
    backward: Callable[..., List[Optional[np.ndarray]]]


PRIMITIVES: Dict[str, Primitive] = {}


def register(name: str, check: Callable, forward: Callable, backward: Callable) -> None:
    if name in PRIMITIVES:
        raise StabilityValidationError(f"primitive already registered: {name}")
    PRIMITIVES[name] = Primitive(name, check, forward, backward)


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs: Any) -> Tensor:
    """
    Run a registered primitive and record it on the active tape.

    Args:
        op: Primitive name (see PRIMITIVES)
        inputs: Input tensors
        attrs: Non-differentiable arguments (axis, eps, token ids, rng ...)

    Returns:
        Output tensor

    Raises:
        StabilityValidationError: Unknown primitive or shape-rule violation
        NonFiniteError: Forward output contains NaN or infinity
    """
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise StabilityValidationError(f"unknown primitive: {op}")
    arrays = tuple(t.data for t in inputs)
    prim.check(arrays, attrs)
    out, cache = prim.forward(arrays, attrs)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite output", where=op)

    tape = active_tape()
    if tape is None:
        return Tensor(out)
    node_id = tape.new_id()
    tape.entries.append(TapeEntry(
        op=op,
        input_ids=tuple(t.node_id for t in inputs),
        output_id=node_id,
        inputs=arrays,
        output=out,
        cache=cache,
        attrs=attrs,
    ))
    return Tensor(out, node_id)


def backward(loss: Tensor, tape: Tape) -> Dict[str, np.ndarray]:
    """
    Reverse pass from a scalar loss node.

    Returns:
        Gradient per watched leaf name, in watch order; leaves off the loss
        path get exact zeros.

    Raises:
        StabilityValidationError: If the loss is not a scalar
    """
    if loss.data.shape != ():
        raise StabilityValidationError(f"backward: loss must be scalar, got shape {loss.shape}")

    grads: Dict[int, np.ndarray] = {}
    if loss.node_id is not None:
        grads[loss.node_id] = np.ones_like(loss.data)

    for entry in reversed(tape.entries):
        upstream = grads.pop(entry.output_id, None)
        if upstream is None:
            continue
        prim = PRIMITIVES[entry.op]
        input_grads = prim.backward(upstream, entry.inputs, entry.output, entry.cache, entry.attrs)
        for node_id, g in zip(entry.input_ids, input_grads):
            if node_id is None or g is None:
                continue
            if node_id in grads:
                grads[node_id] = grads[node_id] + g
            else:
                grads[node_id] = g

    result = {}
    for name, leaf in tape.leaves.items():
        g = grads.get(leaf.node_id)
        result[name] = np.zeros_like(leaf.data) if g is None else g.astype(leaf.dtype, copy=False)
    return result


def value_and_grad(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore) -> Tuple[float, ParamStore]:
    """Evaluate loss_fn under a fresh tape and return (loss, gradients)."""
    with Tape() as tape:
        tape.watch_all(params)
        loss = loss_fn(params)
    grads = backward(loss, tape)
    return float(loss.data), ParamStore((name, grads[name]) for name in params)


def gradient_norm(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore) -> float:
    """Global L2 norm of the full gradient of loss_fn at params."""
    _, grads = value_and_grad(loss_fn, params)
    return global_norm(grads.values())


def finite_difference_check(
    loss_fn: Callable[[ParamStore], Union[Tensor, float]],
    params: ParamStore,
    samples: int = 200,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """
    Compare analytic gradients with central differences on sampled coordinates.

    Args:
        loss_fn: Deterministic loss over a ParamStore (dropout disabled)
        params: Evaluation point; never mutated
        samples: Number of coordinates sampled (capped at the parameter count)
        step: Central-difference step
        seed: Root seed of the coordinate sampling stream

    Returns:
        Max of |analytic - central| / max(|analytic|, |central|, 1e-12);
        0.0 for a parameter-free model.

    Raises:
        StabilityValidationError: samples < 1, or loss_fn not deterministic
    """
    if samples < 1:
        raise StabilityValidationError(f"samples must be >= 1, got {samples}")
    total = params.numel()
    if total == 0:
        logger.warning("finite_difference_check: no parameters, vacuous pass")
        return 0.0

    def scalar(params_: ParamStore) -> float:
        with no_grad():
            out = loss_fn(params_)
        return float(out.data) if isinstance(out, Tensor) else float(out)

    first, second = scalar(params), scalar(params)
    if first != second:
        raise StabilityValidationError(
            f"finite_difference_check: loss_fn is not deterministic ({first!r} != {second!r})"
        )

    _, grads = value_and_grad(loss_fn, params)

    gen = RngStream(seed).split("sampling").generator
    flat = gen.choice(total, size=min(samples, total), replace=False)
    names = params.names()
    offsets = np.cumsum([0] + [params[n].size for n in names])

    work = params.copy()
    worst = 0.0
    for index in np.sort(flat):
        slot = int(np.searchsorted(offsets, index, side="right")) - 1
        name = names[slot]
        local = int(index - offsets[slot])
        arr = work[name]
        original = arr.flat[local]
        arr.flat[local] = original + step
        plus = scalar(work)
        arr.flat[local] = original - step
        minus = scalar(work)
        arr.flat[local] = original
        central = (plus - minus) / (2.0 * step)
        analytic = float(grads[name].flat[local])
        err = abs(analytic - central) / max(abs(analytic), abs(central), 1e-12)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _arity(op: str, arrays: Sequence[np.ndarray], n: int) -> None:
    if len(arrays) != n:
        raise StabilityValidationError(f"{op}: expected {n} inputs, got {len(arrays)}")


def _broadcastable(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        ensure_shapes(op, False, a.shape, b.shape)


# matmul ------------------------------------------------------------------

def _matmul_check(x: Sequence[np.ndarray], attrs: Dict[str, Any]) -> None:
    _arity("matmul", x, 2)
    a, b = x
    ok = a.ndim >= 2 and b.ndim >= 2 and a.shape[-1] == b.shape[-2]
    if ok:
        try:
            np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        except ValueError:
            ok = False
    ensure_shapes("matmul", ok, a.shape, b.shape)


def _matmul_fwd(x, attrs):
    return np.matmul(x[0], x[1]), None


def _matmul_bwd(g, x, out, cache, attrs):
    a, b = x
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


register("matmul", _matmul_check, _matmul_fwd, _matmul_bwd)


# add / mul / scale --------------------------------------------------------

def _binary_check(op):
    def check(x, attrs):
        _arity(op, x, 2)
        _broadcastable(op, x[0], x[1])
    return check


register(
    "add",
    _binary_check("add"),
    lambda x, attrs: (x[0] + x[1], None),
    lambda g, x, out, cache, attrs: [_unbroadcast(g, x[0].shape), _unbroadcast(g, x[1].shape)],
)

register(
    "mul",
    _binary_check("mul"),
    lambda x, attrs: (x[0] * x[1], None),
    lambda g, x, out, cache, attrs: [_unbroadcast(g * x[1], x[0].shape), _unbroadcast(g * x[0], x[1].shape)],
)


def _unary_check(op):
    def check(x, attrs):
        _arity(op, x, 1)
    return check


register(
    "scale",
    _unary_check("scale"),
    lambda x, attrs: ((x[0] * attrs["factor"]).astype(x[0].dtype, copy=False), None),
    lambda g, x, out, cache, attrs: [(g * attrs["factor"]).astype(g.dtype, copy=False)],
)


# softmax -----------------------------------------------------------------

def _softmax_fwd(x, attrs):
    z = x[0] - x[0].max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True), None


def _softmax_bwd(g, x, y, cache, attrs):
    return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


register("softmax", _unary_check("softmax"), _softmax_fwd, _softmax_bwd)


# gelu (tanh approximation) ----------------------------------------------

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_K = 0.044715


def _gelu_fwd(x, attrs):
    v = x[0]
    t = np.tanh(_GELU_C * (v + _GELU_K * v ** 3))
    return (0.5 * v * (1.0 + t)).astype(v.dtype, copy=False), t


def _gelu_bwd(g, x, out, t, attrs):
    v = x[0]
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * v * v)
    return [(g * (0.5 * (1.0 + t) + 0.5 * v * dt)).astype(v.dtype, copy=False)]


register("gelu", _unary_check("gelu"), _gelu_fwd, _gelu_bwd)

register(
    "tanh",
    _unary_check("tanh"),
    lambda x, attrs: (np.tanh(x[0]), None),
    lambda g, x, y, cache, attrs: [g * (1.0 - y * y)],
)


# layer norm --------------------------------------------------------------

def _layer_norm_check(x, attrs):
    _arity("layer_norm", x, 3)
    v, gain, offset = x
    h = v.shape[-1] if v.ndim else None
    ensure_shapes("layer_norm", gain.shape == (h,) and offset.shape == (h,), v.shape, gain.shape, offset.shape)


def _layer_norm_fwd(x, attrs):
    v, gain, offset = x
    mean = v.mean(axis=-1, keepdims=True)
    centered = v - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + attrs.get("eps", 1e-12))
    xhat = (centered * inv).astype(v.dtype, copy=False)
    return xhat * gain + offset, (xhat, inv)


def _layer_norm_bwd(g, x, out, cache, attrs):
    v, gain, offset = x
    xhat, inv = cache
    reduce_axes = tuple(range(g.ndim - 1))
    g_gain = (g * xhat).sum(axis=reduce_axes)
    g_offset = g.sum(axis=reduce_axes)
    gx_hat = g * gain
    gx = inv * (
        gx_hat
        - gx_hat.mean(axis=-1, keepdims=True)
        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
    )
    return [gx.astype(v.dtype, copy=False), g_gain, g_offset]


register("layer_norm", _layer_norm_check, _layer_norm_fwd, _layer_norm_bwd)


# row gather (embedding lookup and position selection) --------------------

def _gather_check(op):
    def check(x, attrs):
        _arity(op, x, 1)
        table = x[0]
        ids = np.asarray(attrs["ids"])
        ensure_shapes(op, table.ndim == 2 and np.issubdtype(ids.dtype, np.integer), table.shape, ids.shape)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise StabilityValidationError(
                f"{op}: ids must lie in [0, {table.shape[0]}), got range "
                f"[{int(ids.min())}, {int(ids.max())}]"
            )
    return check


def _gather_fwd(x, attrs):
    return x[0][attrs["ids"]], None


def _gather_bwd(g, x, out, cache, attrs):
    grad = np.zeros_like(x[0])
    np.add.at(grad, np.asarray(attrs["ids"]).ravel(), g.reshape(-1, x[0].shape[1]))
    return [grad]


register("embedding", _gather_check("embedding"), _gather_fwd, _gather_bwd)
register("take_rows", _gather_check("take_rows"), _gather_fwd, _gather_bwd)


# dropout -----------------------------------------------------------------

def _dropout_check(x, attrs):
    _arity("dropout", x, 1)
    if not isinstance(attrs.get("rng"), np.random.Generator):
        raise StabilityValidationError("dropout requires an explicit numpy Generator stream")
    p = attrs["p"]
    if not 0.0 <= p < 1.0:
        raise StabilityValidationError(f"dropout: p must lie in [0, 1), got {p}")


def _dropout_fwd(x, attrs):
    v, p = x[0], attrs["p"]
    keep = (attrs["rng"].random(v.shape) >= p).astype(v.dtype)
    mask = keep / v.dtype.type(1.0 - p)
    return v * mask, mask


register(
    "dropout",
    _dropout_check,
    _dropout_fwd,
    lambda g, x, out, mask, attrs: [g * mask],
)


# cross entropy -----------------------------------------------------------

def _xent_check(x, attrs):
    _arity("cross_entropy", x, 1)
    logits = x[0]
    targets = np.asarray(attrs["targets"])
    ok = logits.ndim == 2 and targets.shape == (logits.shape[0],) and logits.shape[0] > 0
    ensure_shapes("cross_entropy", ok, logits.shape, targets.shape)
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise StabilityValidationError(
            f"cross_entropy: targets must lie in [0, {logits.shape[1]})"
        )


def _xent_fwd(x, attrs):
    logits = x[0]
    targets = np.asarray(attrs["targets"])
    shifted = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    picked = shifted[np.arange(len(targets)), targets]
    loss = np.mean(log_z - picked)
    probs = np.exp(shifted - log_z[:, None])
    return np.asarray(loss, dtype=logits.dtype), probs


def _xent_bwd(g, x, out, probs, attrs):
    targets = np.asarray(attrs["targets"])
    grad = probs.copy()
    grad[np.arange(len(targets)), targets] -= 1.0
    grad *= float(g) / len(targets)
    return [grad.astype(x[0].dtype)]


register("cross_entropy", _xent_check, _xent_fwd, _xent_bwd)


# reductions and reshaping -----------------------------------------------

def _reduce_fwd(kind):
    def fwd(x, attrs):
        fn = np.sum if kind == "sum" else np.mean
        return np.asarray(fn(x[0], axis=attrs.get("axis")), dtype=x[0].dtype), None
    return fwd


def _reduce_bwd(kind):
    def bwd(g, x, out, cache, attrs):
        v = x[0]
        axis = attrs.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        grad = np.broadcast_to(g, v.shape).astype(v.dtype)
        if kind == "mean":
            count = v.size if axis is None else v.shape[axis]
            grad = grad / v.dtype.type(count)
        return [grad]
    return bwd


register("sum", _unary_check("sum"), _reduce_fwd("sum"), _reduce_bwd("sum"))
register("mean", _unary_check("mean"), _reduce_fwd("mean"), _reduce_bwd("mean"))


def _reshape_check(x, attrs):
    _arity("reshape", x, 1)
    shape = tuple(attrs["shape"])
    ensure_shapes("reshape", int(np.prod(shape)) == x[0].size, x[0].shape, shape)


register(
    "reshape",
    _reshape_check,
    lambda x, attrs: (x[0].reshape(attrs["shape"]), None),
    lambda g, x, out, cache, attrs: [g.reshape(x[0].shape)],
)


def _transpose_check(x, attrs):
    _arity("transpose", x, 1)
    axes = tuple(attrs["axes"])
    ensure_shapes("transpose", sorted(axes) == list(range(x[0].ndim)), x[0].shape, axes)


register(
    "transpose",
    _transpose_check,
    lambda x, attrs: (np.transpose(x[0], attrs["axes"]), None),
    lambda g, x, out, cache, attrs: [np.transpose(g, np.argsort(attrs["axes"]))],
)


# ---------------------------------------------------------------------------
# Functional wrappers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("matmul", [a, b])


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("add", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply_primitive("mul", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return apply_primitive("scale", [x], factor=factor)


def softmax(x: Tensor) -> Tensor:
    return apply_primitive("softmax", [x])


def gelu(x: Tensor) -> Tensor:
    return apply_primitive("gelu", [x])


def tanh(x: Tensor) -> Tensor:
    return apply_primitive("tanh", [x])


def layer_norm(x: Tensor, gain: Tensor, offset: Tensor, eps: float = 1e-12) -> Tensor:
    return apply_primitive("layer_norm", [x, gain, offset], eps=eps)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    return apply_primitive("embedding", [table], ids=np.asarray(ids))


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    return apply_primitive("take_rows", [x], ids=np.asarray(rows))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator]) -> Tensor:
    return apply_primitive("dropout", [x], p=p, rng=rng)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    return apply_primitive("cross_entropy", [logits], targets=np.asarray(targets))


def reduce_sum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return apply_primitive("sum", [x], axis=axis)


def reduce_mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    return apply_primitive("mean", [x], axis=axis)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return apply_primitive("reshape", [x], shape=tuple(shape))


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    return apply_primitive("transpose", [x], axes=tuple(axes))
