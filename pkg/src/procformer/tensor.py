"""A small dense-tensor engine with tape-based reverse-mode differentiation.

Only the operations needed by the transformer are provided. Every op that
touches a tensor with ``requires_grad`` appends a node to the active
:class:`Tape`; :func:`backward` walks the tape in reverse, accumulates
gradients into leaf tensors and clears the tape.

All values are float64.
"""
import contextlib
import math
import threading

import numpy as np

from .exceptions import AllMasked, BadTargetId, NonScalarLoss, ShapeMismatch

__all__ = [
    "Tensor", "Tape", "Parameter", "current_tape", "no_grad", "backward",
    "add", "mul", "mul_scalar", "matmul", "relu", "reshape", "softmax_last_axis",
    "layer_norm_last_axis", "dropout", "embedding_lookup", "max_over_axis",
    "concat_last_axis", "transpose_last_two", "sum", "mean",
    "cross_entropy", "log_cosh", "make_rng",
]


class Tensor:
    """n-dimensional float64 value, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._is_leaf = True

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def values(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named trainable tensor."""

    __slots__ = ("name", "tensor")

    def __init__(self, name, tensor):
        if not tensor.requires_grad:
            tensor.requires_grad = True
        self.name = name
        self.tensor = tensor

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations.

    Use as a context manager to make it the active tape of the current
    thread; otherwise each thread has its own default tape.
    """

    def __init__(self):
        self.nodes = []
        self.enabled = True
        self._prev = None

    def __len__(self):
        return len(self.nodes)

    def record(self, out, inputs, backward_fn):
        self.nodes.append(_Node(out, inputs, backward_fn))

    def clear(self):
        self.nodes.clear()

    def __enter__(self):
        self._prev = getattr(_state, "tape", None)
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False


_state = threading.local()


def current_tape():
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def no_grad():
    """Disable recording on the current tape (inference mode)."""
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def make_rng(seed, *stream):
    """Counter-based (Philox) generator keyed by ``seed`` and a stream path."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(ss))


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, inputs, backward_fn):
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        tape = current_tape()
        if tape.enabled:
            out.requires_grad = True
            out._is_leaf = False
            tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeMismatch(f"{op}: incompatible shapes {a} and {b}") from None


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1 or loss.ndim != 0:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    tape = current_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    tape.clear()


# -- elementwise and linear algebra -----------------------------------------

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def mul_scalar(x, c):
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dimensions differ in {a.shape} and {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), grad_fn)


def relu(x):
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _result(data, (x,), lambda g: (g.reshape(old),))


def transpose_last_two(x):
    if x.ndim < 2:
        raise ShapeMismatch(f"transpose_last_two needs ndim >= 2, got {x.shape}")
    return _result(np.swapaxes(x.data, -1, -2), (x,),
                   lambda g: (np.swapaxes(g, -1, -2),))


def concat_last_axis(*tensors):
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeMismatch(
                f"concat_last_axis: leading shapes differ, {tensors[0].shape} and {t.shape}")
    bounds = np.cumsum([t.shape[-1] for t in tensors])[:-1]
    return _result(np.concatenate([t.data for t in tensors], axis=-1), tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=-1)))


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x):
    n = x.data.size
    shape = x.shape
    return _result(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),))


# -- normalisation, masking, pooling ------------------------------------------

def _check_mask(mask, shape, op):
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: mask shape {np.shape(mask)} vs input {shape}") from None
    return mask


def softmax_last_axis(x, mask=None):
    """Softmax over the last axis; positions where ``mask`` is False get 0."""
    z = x.data
    if mask is None:
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
    else:
        keep = _check_mask(mask, z.shape, "softmax_last_axis")
        if not keep.any(axis=-1).all():
            raise AllMasked("softmax row with every position masked")
        zmax = np.where(keep, z, -np.inf).max(axis=-1, keepdims=True)
        e = np.where(keep, np.exp(np.where(keep, z - zmax, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), grad_fn)


def layer_norm_last_axis(x, gain, bias, eps=1e-6):
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} vs features {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv_std
    gd = gain.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        gx_hat = g * gd
        gx = inv_std * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), grad_fn)


def dropout(x, rate, training, rng):
    """Inverted dropout. Returns ``x`` itself when not training."""
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * keep, (x,), lambda g: (g * keep,))


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeMismatch(f"embedding ids out of range for table {table.shape}")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(table.data[ids], (table,), grad_fn)


def max_over_axis(x, axis, mask=None):
    """Max over ``axis``, ignoring positions where ``mask`` is False."""
    axis = axis % x.ndim
    z = x.data
    if mask is not None:
        keep = _check_mask(mask, z.shape, "max_over_axis")
        if not keep.any(axis=axis).all():
            raise AllMasked("max_over_axis with every position masked")
        z = np.where(keep, z, -np.inf)
    idx = np.expand_dims(z.argmax(axis=axis), axis)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)
    shape = x.shape

    def grad_fn(g):
        gx = np.zeros(shape)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), grad_fn)


# -- losses ---------------------------------------------------------------------

def cross_entropy(logits, targets, class_weights=None):
    """Mean (optionally class-weighted) negative log-likelihood of ``targets``."""
    if logits.ndim != 2:
        raise ShapeMismatch(f"cross_entropy expects [batch, classes], got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeMismatch(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise BadTargetId(f"target ids must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - log_z
    rows = np.arange(n)
    if class_weights is None:
        w = np.ones(n)
    else:
        cw = np.asarray(class_weights, dtype=np.float64)
        if cw.shape != (c,) or np.any(cw <= 0):
            raise ValueError("class_weights must be positive with one entry per class")
        w = cw[targets]
    total = w.sum()
    loss = -(w * logp[rows, targets]).sum() / total

    def grad_fn(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (w / total)[:, None] * g,)

    return _result(loss, (logits,), grad_fn)


_LOG2 = math.log(2.0)


def log_cosh(pred, target):
    """Mean of log(cosh(pred - target)), stable for large residuals."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"log_cosh: pred {pred.shape} vs target {target.shape}")
    r = pred.data - target.data
    a = np.abs(r)
    loss = np.mean(a + np.log1p(np.exp(-2.0 * a)) - _LOG2)
    n = r.size

    def grad_fn(g):
        gr = np.tanh(r) * (g / n)
        return gr, -gr

    return _result(loss, (pred, target), grad_fn)
