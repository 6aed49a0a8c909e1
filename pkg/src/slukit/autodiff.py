"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps a row-major numpy buffer (float32 for training runs,
float64 for gradient-check tests). Differentiable operations record a
``TapeNode`` on their output; ``backward`` orders the recorded nodes
topologically and replays them in reverse, accumulating gradients
additively into ``Tensor.grad``. The tape is confined to the thread that
built it; tensors themselves are plain values.

All randomness flows through ``make_rng``: a numpy ``Generator`` backed by
PCG64 (O'Neill's permuted congruential generator, 128-bit state), so every
initialization is fully determined by its integer seed. Parameters are
initialized scaled-uniform with bound sqrt(6 / (fan_in + fan_out)).
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, InputError, ValidationError

FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, greedy decode)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class TapeNode:
    """One recorded operation: input tensors plus a rule mapping the
    output gradient to per-input gradients (None for non-differentiable
    inputs)."""

    __slots__ = ("inputs", "backward_fn")

    def __init__(self, inputs, backward_fn):
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense n-dimensional array with optional gradient participation.

    ``requires_grad`` controls tape recording; ``trainable`` controls
    whether the optimizer may update the tensor (frozen parameters keep
    ``trainable=False``).
    """

    __slots__ = ("data", "requires_grad", "trainable", "grad", "node")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.trainable = True
        self.grad = None
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return (
            f"Tensor(shape={tuple(self.data.shape)}, dtype={self.data.dtype.name},"
            f" requires_grad={self.requires_grad})"
        )


def _result(out_data, inputs, backward_fn) -> Tensor:
    out = Tensor(out_data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(tuple(inputs), backward_fn)
    return out


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        names = sorted(d.name for d in dtypes)
        raise ValidationError(f"mixed dtypes in one operation: {names}")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Topologically ordered record of the operations reachable from a root.

    Built on demand by ``backward``; operations appear in an order where
    every node's inputs precede it, and the reverse sweep therefore visits
    each recorded operation exactly once.
    """

    def __init__(self, ordered_outputs):
        self.ordered_outputs = ordered_outputs

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in seen or tensor.node is None:
                continue
            seen.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from `loss`.

    Accumulation is additive: a tensor feeding several consumers receives
    the sum of its path gradients. Gradients are not cleared here; the
    caller zeroes them between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss.node is None and not loss.requires_grad:
        raise ContractError("loss is not on the tape (no recorded operation reaches it)")
    tape = Tape.from_root(loss)
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.data)
    loss.grad += np.ones_like(loss.data)
    for out in reversed(tape.ordered_outputs):
        node = out.node
        grads = node.backward_fn(out.grad)
        for parent, g in zip(node.inputs, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


# ---------------------------------------------------------------------------
# primitive operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bwd(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _result(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    sv = x.data.dtype.type(s)

    def bwd(g):
        return (g * sv,)

    return _result(x.data * sv, (x,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}"
        )
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), bwd)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def bwd(g):
        return (g * (x.data > 0),)

    return _result(out, (x,), bwd)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax along `axis`.

    `mask` (boolean, True = keep, broadcastable to x) excludes positions:
    they receive exactly zero weight. A row with no kept position is an
    error; the caller has asked for a distribution over nothing.
    """
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {x.shape}")
    data = x.data
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), data.shape)
        if not m.any(axis=axis).all():
            raise ValidationError("softmax: a row has no attendable position under the mask")
        data = np.where(m, data, -np.inf)
    mx = np.max(data, axis=axis, keepdims=True)
    e = np.exp(data - mx)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (x,), bwd)


def _validate_one_hot(q: np.ndarray):
    if not np.all((q == 0) | (q == 1)):
        raise ValidationError("cross_entropy: target contains values other than 0/1")
    rows = q.reshape(-1, q.shape[-1])
    if not np.all(rows.sum(axis=-1) == 1):
        raise ValidationError("cross_entropy: each target row must be one-hot")


def cross_entropy(logits: Tensor, one_hot: Tensor) -> Tensor:
    """Sum over rows of -sum_i q_i log softmax(logits)_i, class axis last.

    Returns a scalar; for a batch of rows the per-row losses are summed.
    Gradient w.r.t. logits is softmax(logits) - one_hot (scaled by the
    incoming gradient); the target never receives a gradient.
    """
    _check_same_dtype(logits, one_hot)
    if logits.shape != one_hot.shape:
        raise DimensionError(
            f"cross_entropy: logits {logits.shape} vs target {one_hot.shape}"
        )
    q = one_hot.data
    _validate_one_hot(q)
    x = logits.data
    mx = np.max(x, axis=-1, keepdims=True)
    lse = mx + np.log(np.sum(np.exp(x - mx), axis=-1, keepdims=True))
    p = np.exp(x - lse)
    loss = np.sum(lse[..., 0] - np.sum(q * x, axis=-1))

    def bwd(g):
        return (p - q) * g, None

    return _result(np.asarray(loss, dtype=x.dtype), (logits, one_hot), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    A zero-variance row normalizes to zeros (eps keeps the denominator
    finite), so constant inputs map to `bias`.
    """
    _check_same_dtype(x, gain, bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(
            f"layer_norm: gain/bias must be ({d},), got {gain.shape} and {bias.shape}"
        )
    mu = np.mean(x.data, axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        lead = tuple(range(g.ndim - 1))
        dgain = np.sum(g * xhat, axis=lead) if g.ndim > 1 else g * xhat
        dbias = np.sum(g, axis=lead) if g.ndim > 1 else g
        dxhat = g * gain.data
        m1 = np.mean(dxhat, axis=-1, keepdims=True)
        m2 = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    _check_same_dtype(*tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError(f"embedding_lookup expects a 1-D id sequence, got {ids.shape}")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise InputError(
            f"embedding_lookup: id out of range [0, {table.shape[0]}) in {ids.tolist()}"
        )
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(out, (table,), bwd)


def max_over_axis(x: Tensor, axis: int = 0) -> Tensor:
    """Element-wise maximum along `axis`. The gradient flows only to the
    first (lowest-index) maximum of each slice, so ties are deterministic."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"max_over_axis: axis {axis} invalid for shape {x.shape}")
    idx = np.argmax(x.data, axis=axis)
    out = np.max(x.data, axis=axis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(
            gx, np.expand_dims(idx, axis=axis), np.expand_dims(g, axis=axis), axis=axis
        )
        return (gx,)

    return _result(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.asarray(np.sum(x.data), dtype=x.data.dtype)

    def bwd(g):
        return (np.ones_like(x.data) * g,)

    return _result(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = np.reshape(x.data, shape)

    def bwd(g):
        return (np.reshape(g, x.shape),)

    return _result(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bwd(g):
        return (np.ascontiguousarray(np.transpose(g, inv)),)

    return _result(np.transpose(x.data, axes), (x,), bwd)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0 (no tape node recorded)."""
    if p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValidationError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return mul(x, Tensor(keep))


# ---------------------------------------------------------------------------
# parameter containers, initialization, optimizer


def make_rng(seed: int) -> np.random.Generator:
    """The kit's single generator family: PCG64 under the given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(*parts: int) -> np.random.Generator:
    """Independent stream keyed by a tuple of integers (seed, epoch, ...)."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(parts))))


def glorot_uniform(rng, shape, fan_in: int, fan_out: int, dtype=np.float32) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


class Module:
    """Minimal parameter container.

    Parameters are discovered from instance attributes: Tensor attributes,
    Module attributes, and lists of Modules (names get dotted paths such as
    ``encoder.layers.0.self_attn.wq``). Attributes starting with ``_`` are
    ignored, which is where non-parameter buffers live.
    """

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Tensor):
                params[full] = value
            elif isinstance(value, Module):
                params.update(value.named_parameters(full))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        params.update(item.named_parameters(f"{full}.{i}"))
        return params

    def zero_grads(self):
        for p in self.named_parameters().values():
            p.zero_grad()

    def freeze(self):
        for p in self.named_parameters().values():
            p.trainable = False
            p.requires_grad = False


@dataclass
class AdamState:
    """Adam optimizer state; moment buffers are keyed by parameter name."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState):
    """One bias-corrected Adam update. Parameters with trainable=False are
    untouched; a trainable parameter without a gradient is a contract error."""
    state.t += 1
    t = state.t
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        if not p.trainable:
            continue
        g = grads.get(name)
        if g is None:
            raise ContractError(f"missing gradient for trainable parameter '{name}'")
        if g.shape != p.data.shape:
            raise ContractError(
                f"gradient shape {g.shape} does not match parameter '{name}' {p.data.shape}"
            )
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
