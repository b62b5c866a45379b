"""Reverse-mode autodiff on float64 numpy arrays, plus Adam.

Ops record onto an explicit Tape (construction order is already topological);
``backward`` walks the records once, in reverse, accumulating vector-Jacobian
products.  Repeated use of the same parameter sums its gradients, which the
cross-layer-shared transformer relies on.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
right operand whose shape is a suffix of the left's (leading-batch broadcast,
e.g. a (H,) bias onto (B, L, H)).  Anything else is a ShapeError; reshape
explicitly.

Set ``PFHIN_DEBUG_NAN=1`` to make every forward check for non-finite values.
"""

import os
from contextlib import contextmanager

import numpy as np
from scipy.special import erf, expit

from .errors import NumericError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _debug_nan():
    return os.environ.get("PFHIN_DEBUG_NAN", "") not in ("", "0")


class Tensor:
    """A float64 array plus gradient metadata."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_rec")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._rec = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    # operator sugar; constants pass through as plain arrays
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Tape:
    """Ordered op records; inputs always precede their consumers."""

    __slots__ = ("records", "consumed")

    def __init__(self):
        self.records = []
        self.consumed = False


_ACTIVE = None


@contextmanager
def recording():
    """Open a fresh tape; ops inside the block record backward rules."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = Tape()
    try:
        yield _ACTIVE
    finally:
        _ACTIVE = prev


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, inputs, vjp):
    """Attach a tape record when recording and some input can need grad."""
    if _ACTIVE is None:
        return out
    if not any(t.requires_grad or t._rec is not None for t in inputs):
        return out
    out.requires_grad = True
    out._tape = _ACTIVE
    out._rec = len(_ACTIVE.records)
    _ACTIVE.records.append((out, inputs, vjp))
    return out


def _check_finite(name, arr):
    if _debug_nan() and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in forward of '{name}'")
    return arr


def _suffix_ok(big, small):
    return len(small) <= len(big) and big[len(big) - len(small):] == small


def _unbroadcast(g, shape):
    """Reduce a gradient back to an operand broadcast from ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _elementwise_shapes(a, b, opname):
    if a.shape == b.shape:
        return a.shape
    if _suffix_ok(a.shape, b.shape):
        return a.shape
    if _suffix_ok(b.shape, a.shape):
        return b.shape
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are neither "
                     "equal nor leading-batch compatible")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _elementwise_shapes(a.data, b.data, "add")
    out = Tensor(_check_finite("add", a.data + b.data))
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _elementwise_shapes(a.data, b.data, "sub")
    out = Tensor(_check_finite("sub", a.data - b.data))
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape),
                                           -_unbroadcast(g, b.data.shape)))


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _elementwise_shapes(a.data, b.data, "mul")
    out = Tensor(_check_finite("mul", a.data * b.data))
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.data.shape),
                              _unbroadcast(g * a.data, b.data.shape)))


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def reshape(t, shape):
    t = _wrap(t)
    out = Tensor(t.data.reshape(shape))
    return _record(out, (t,), lambda g: (g.reshape(t.data.shape),))


def transpose(t, axes):
    t = _wrap(t)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.transpose(t.data, axes))
    return _record(out, (t,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis):
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _record(out, tuple(tensors), vjp)


def slice_axis(t, axis, start, stop):
    t = _wrap(t)
    idx = [slice(None)] * t.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(t.data[idx])

    def vjp(g):
        buf = np.zeros_like(t.data)
        buf[idx] = g
        return (buf,)

    return _record(out, (t,), vjp)


def embedding_gather(table, idx):
    """Rows of a (V, D) table at integer positions idx (any shape)."""
    table = _wrap(table)
    idx = np.asarray(idx)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be rank 2, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding_gather: index out of range for table {table.data.shape}")
    out = Tensor(table.data[idx])

    def vjp(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        return (buf,)

    return _record(out, (table,), vjp)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be rank >= 2, got "
                         f"{a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    out = Tensor(_check_finite("matmul", a.data @ b.data))

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape))

    return _record(out, (a, b), vjp)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(t):
    t = _wrap(t)
    s = expit(t.data)
    out = Tensor(_check_finite("sigmoid", s))
    return _record(out, (t,), lambda g: (g * s * (1.0 - s),))


def tanh(t):
    t = _wrap(t)
    y = np.tanh(t.data)
    out = Tensor(y)
    return _record(out, (t,), lambda g: (g * (1.0 - y * y),))


def gelu(t):
    """Exact Gaussian-CDF form: x * Phi(x)."""
    t = _wrap(t)
    x = t.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(_check_finite("gelu", x * phi))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI

    def vjp(g):
        return (g * (phi + x * pdf),)

    return _record(out, (t,), vjp)


def softmax(t):
    """Softmax over the last axis; pair with a -1e30 additive mask upstream."""
    t = _wrap(t)
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(_check_finite("softmax", s))

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _record(out, (t,), vjp)


def layer_norm(t, gain, bias, eps=1e-12):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    t, gain, bias = _wrap(t), _wrap(gain), _wrap(bias)
    d = t.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must be ({d},), got "
                         f"{gain.data.shape} and {bias.data.shape}")
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (t.data - mu) * inv
    out = Tensor(_check_finite("layer_norm", xhat * gain.data + bias.data))

    def vjp(g):
        gg = g * gain.data
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        gx = inv * (gg - m1 - xhat * m2)
        axes = tuple(range(g.ndim - 1))
        return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    return _record(out, (t, gain, bias), vjp)


# ---------------------------------------------------------------------------
# reductions and losses
# ---------------------------------------------------------------------------

def mean(t, axis=None):
    t = _wrap(t)
    out = Tensor(t.data.mean(axis=axis))
    if axis is None:
        n = t.data.size

        def vjp(g):
            return (np.full_like(t.data, float(g) / n),)
    else:
        n = t.data.shape[axis]

        def vjp(g):
            return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return _record(out, (t,), vjp)


def sum_all(t):
    t = _wrap(t)
    out = Tensor(t.data.sum())
    return _record(out, (t,), lambda g: (np.full_like(t.data, float(g)),))


def cross_entropy_with_logits(logits, targets, reduction="mean"):
    """-sum(targets * log_softmax(logits)) over the last axis.

    ``targets`` are fixed probability rows (smoothed labels), not a Tensor.
    Reduction 'mean' averages over all leading positions, 'sum' adds them.
    """
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.data.shape:
        raise ShapeError(f"cross_entropy_with_logits: targets {targets.shape} "
                         f"vs logits {logits.data.shape}")
    if reduction not in ("mean", "sum"):
        raise ShapeError(f"cross_entropy_with_logits: unknown reduction '{reduction}'")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    per_row = -(targets * logp).sum(axis=-1)
    n_rows = max(per_row.size, 1)
    val = per_row.sum() / n_rows if reduction == "mean" else per_row.sum()
    out = Tensor(_check_finite("cross_entropy_with_logits", val))
    p = np.exp(logp)

    def vjp(g):
        scale = float(g) / n_rows if reduction == "mean" else float(g)
        return ((p - targets) * scale,)

    return _record(out, (logits,), vjp)


def dropout(t, rate, rng, training):
    """Inverted-scaling dropout; identity when not training or rate 0."""
    t = _wrap(t)
    if not training or rate == 0.0:
        return t
    if not (0.0 <= rate < 1.0):
        raise ShapeError(f"dropout: rate must be in [0,1), got {rate}")
    keep = (rng.random(t.data.shape) >= rate) / (1.0 - rate)
    out = Tensor(t.data * keep)
    return _record(out, (t,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate .grad on every requires_grad tensor contributing to ``loss``."""
    if not isinstance(loss, Tensor) or loss.data.shape != ():
        raise NumericError(
            f"backward requires a scalar Tensor, got shape "
            f"{getattr(loss, 'data', np.empty(0)).shape}")
    tape = loss._tape
    if tape is None:
        raise NumericError("backward on a tensor with no recorded tape "
                           "(constant, or tape already consumed)")
    if tape.consumed:
        raise NumericError("backward called twice on the same tape")
    tape.consumed = True

    pending = {id(loss): np.asarray(1.0)}
    for rec_idx in range(loss._rec, -1, -1):
        out, inputs, vjp = tape.records[rec_idx]
        g = pending.pop(id(out), None)
        if g is None:
            continue
        # all consumers sit later on the tape, so g is already complete
        out.grad = np.asarray(g, dtype=np.float64)
        grads = vjp(g)
        for t, gt in zip(inputs, grads):
            if t._rec is not None and t._tape is tape:
                key = id(t)
                if key in pending:
                    pending[key] = pending[key] + gt
                else:
                    pending[key] = gt
            if t.requires_grad and t._rec is None:
                # leaf parameter: accumulate across backward calls
                if t.grad is None:
                    t.grad = np.array(gt, dtype=np.float64, copy=True)
                else:
                    t.grad += gt


# ---------------------------------------------------------------------------
# Adam with linear lr decay
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam; lr decays linearly to 0 over total_steps.

    ``groups`` is a list of dicts {"params": [...], "lr_scale": float} or a
    flat list of Tensors (one group, scale 1).  A group with lr_scale 0 is
    frozen but its moment buffers still decay.
    """

    def __init__(self, groups, lr, beta1=0.9, beta2=0.999, eps=1e-8,
                 total_steps=None):
        if groups and isinstance(groups[0], Tensor):
            groups = [{"params": list(groups), "lr_scale": 1.0}]
        self.groups = [
            {"params": list(g["params"]), "lr_scale": float(g.get("lr_scale", 1.0))}
            for g in groups]
        self.lr0 = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.total_steps = total_steps
        self.step_count = 0
        self._m = {}
        self._v = {}
        for g in self.groups:
            for p in g["params"]:
                self._m[id(p)] = np.zeros_like(p.data)
                self._v[id(p)] = np.zeros_like(p.data)

    def effective_lr(self):
        if self.total_steps is None:
            return self.lr0
        return self.lr0 * max(0.0, 1.0 - self.step_count / self.total_steps)

    def step(self):
        lr = self.effective_lr()  # decayed by completed steps
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for g in self.groups:
            glr = lr * g["lr_scale"]
            for p in g["params"]:
                grad = p.grad
                if grad is None:
                    grad = 0.0
                m = self._m[id(p)]
                v = self._v[id(p)]
                m *= self.beta1
                m += (1.0 - self.beta1) * grad
                v *= self.beta2
                v += (1.0 - self.beta2) * np.square(grad)
                if glr != 0.0:
                    p.data -= glr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for g in self.groups:
            for p in g["params"]:
                p.grad = None
