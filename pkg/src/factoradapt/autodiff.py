"""Minimal reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` records every primitive executed while it is active. Calling
:func:`backward` on a scalar replays the tape once, newest operation first,
and deposits gradients into the :class:`Parameter` objects that were read.
Ops executed with no active tape (or under :func:`no_grad`) are plain numpy
computations.
"""

from __future__ import annotations

import contextlib
import struct
import threading
from typing import Callable, Iterable

import numpy as np

from . import kernels

CHECKPOINT_MAGIC = b"FACTCKPT"
CHECKPOINT_VERSION = 1

_state = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of executed primitives."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}
        self.consumed = False
        self._prev = None

    def __enter__(self):
        self._prev = _tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def leaf(self, param: "Parameter") -> "Tensor":
        t = self.leaves.get(id(param))
        if t is None:
            t = Tensor(param.data, requires_grad=param.trainable)
            t.param = param
            self.leaves[id(param)] = t
        return t


@contextlib.contextmanager
def no_grad():
    prev = _tape()
    _state.tape = None
    try:
        yield
    finally:
        _state.tape = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "param", "tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.backward_fn = None
        self.op = "leaf"
        self.param = None
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def transpose(self, *axes):
        return transpose(self, axes or None)


class Parameter:
    """Named trainable array with a gradient buffer of the same shape."""

    def __init__(self, name: str, data, trainable: bool = True):
        self.name = name
        self.data = np.array(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    @property
    def t(self) -> Tensor:
        tape = _tape()
        if tape is None:
            return Tensor(self.data)
        return tape.leaf(self)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.t
    return Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite values in output")
    out = Tensor(data)
    out.op = op
    tape = _tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
        out.tape = tape
        tape.nodes.append(out)
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)

    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / b.data**2, b.shape))

    return _make("div", a.data / b.data, (a, b), bw)


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: _accum(x, g * y))


def log(x) -> Tensor:
    x = as_tensor(x)
    return _make("log", np.log(x.data), (x,), lambda g: _accum(x, g / x.data))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _make("square", x.data**2, (x,), lambda g: _accum(x, 2.0 * g * x.data))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _make("sigmoid", y, (x,), lambda g: _accum(x, g * y * (1.0 - y)))


def _sigmoid(z):
    # both branches evaluated on clipped input, so no overflow warnings
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, 0.0), (x,), lambda g: _accum(x, g * mask))


def swish(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    y = x.data * s

    def bw(g):
        _accum(x, g * (s + y * (1.0 - s)))

    return _make("swish", y, (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: _accum(x, g * (1.0 - y * y)))


# ---------------------------------------------------------------- reductions / shape


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.shape))

    return _make("sum", np.asarray(y), (x,), bw)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _make("reshape", y, (x,), lambda g: _accum(x, g.reshape(x.shape)))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    y = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make("transpose", y, (x,), lambda g: _accum(x, np.transpose(g, inv)))


def getitem(x, idx) -> Tensor:
    """Basic slicing/indexing."""
    x = as_tensor(x)
    y = x.data[idx]

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] += g
        _accum(x, full)

    return _make("slice", np.array(y), (x,), bw)


def concat(xs: Iterable, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(x.shape) for x in xs)
        ) from None
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def bw(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            _accum(x, np.take(g, np.arange(lo, hi), axis=axis))

    return _make("concat", y, tuple(xs), bw)


def stack(xs: Iterable, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError("stack: mismatched shapes " + ", ".join(str(s) for s in shapes))
    y = np.stack([x.data for x in xs], axis=axis)

    def bw(g):
        for i, x in enumerate(xs):
            _accum(x, np.take(g, i, axis=axis))

    return _make("stack", y, tuple(xs), bw)


def embedding(table, ids) -> Tensor:
    """Row gather ``table[ids]``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table of shape {table.shape}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        _accum(table, full)

    return _make("embedding", table.data[ids], (table,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    y = np.matmul(a.data, b.data)

    def bw(g):
        _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make("matmul", y, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------- normalisation


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make("softmax", y, (x,), bw)


def log_softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        _accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make("log_softmax", y, (x,), bw)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gamma.shape}, {beta.shape} vs input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def bw(g):
        n = x.shape[-1]
        red = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))
        gx = g * gamma.data
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True) - xhat * (gx * xhat).sum(-1, keepdims=True))
        _accum(x, dx)

    return _make("layer_norm", y, (x, gamma, beta), bw)


# ---------------------------------------------------------------- convolution


def _im2col(x, kh, kw, stride):
    # x: (B, C, H, W) -> (B, Ho, Wo, C*kh*kw)
    B, C, H, W = x.shape
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x,
        shape=(B, C, Ho, Wo, kh, kw),
        strides=(s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]),
        writeable=False,
    )
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(B, Ho, Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d(x, weight, bias=None, stride=1) -> Tensor:
    """Valid (no padding) 2-D convolution. x: (B,C,H,W); weight: (O,C,kh,kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    O, C, kh, kw = weight.shape
    B, _, H, W = x.shape
    if H < kh or W < kw:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {weight.shape}")
    xd = np.ascontiguousarray(x.data)
    cols, Ho, Wo = _im2col(xd, kh, kw, stride)
    wmat = weight.data.reshape(O, -1)
    y = cols @ wmat.T  # (B, Ho, Wo, O)
    parents = (x, weight)
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
        parents = parents + (bias,)
    y = y.transpose(0, 3, 1, 2)

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # (B, Ho, Wo, O)
        if weight.requires_grad:
            _accum(weight, np.tensordot(gt, cols, axes=([0, 1, 2], [0, 1, 2])).reshape(weight.shape))
        if bias is not None:
            _accum(bias, gt.sum(axis=(0, 1, 2)))
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            _accum(x, gx)

    return _make("conv2d", np.ascontiguousarray(y), parents, bw)


# ---------------------------------------------------------------- stochastic / composite


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make("dropout", x.data * keep, (x,), lambda g: _accum(x, g * keep))


def scaled_dot_attention(q, k, v, mask=None) -> Tensor:
    """softmax(q kᵀ/√d + mask) v on (..., T, d) tensors; mask is additive."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape} do not conform")
    scores = mul(matmul(q, transpose_last(k)), 1.0 / np.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores, axis=-1), v)


def transpose_last(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def ctc_nll(logp, ext_labels) -> Tensor:
    """Negative CTC log likelihood of one utterance from (T, V) log posteriors.

    ``ext_labels`` is the blank-augmented label sequence. The gradient is
    taken w.r.t. the log posteriors directly.
    """
    logp = as_tensor(logp)
    ext = np.asarray(ext_labels, dtype=np.int64)
    alpha, beta, ll = kernels.ctc_alpha_beta(logp.data, ext)
    if not np.isfinite(ll):
        raise ValueError("ctc: no valid alignment")

    def bw(g):
        # occupancy of each extended state; alpha and beta both include the emission at t
        gamma = alpha + beta - logp.data[:, ext] - ll
        occ = np.zeros_like(logp.data)
        np.add.at(occ.T, ext, np.exp(gamma).T)
        _accum(logp, -g * occ)

    return _make("ctc", np.asarray(-ll), (logp,), bw)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Parameter] = ()) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(parameter) into every trainable Parameter read on the tape.

    Returns a map from parameter name to the gradient contributed by this
    call. Parameters in ``params`` that the loss does not depend on are
    included with an all-zero gradient.
    """
    if loss.data.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    out: dict[str, np.ndarray] = {}
    if tape is None:
        for p in params:
            if p.trainable:
                out[p.name] = np.zeros_like(p.data)
        return out
    if tape.consumed:
        raise TapeError("backward: tape already consumed")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is not None:
            node.backward_fn(node.grad)
    for leaf in tape.leaves.values():
        p = leaf.param
        if not p.trainable:
            continue
        g = leaf.grad if leaf.grad is not None else np.zeros_like(p.data)
        p.grad = p.grad + g
        out[p.name] = g
    for p in params:
        if p.trainable and p.name not in out:
            out[p.name] = np.zeros_like(p.data)
    _release(tape)
    return out


def _release(tape: Tape):
    # nodes and tape reference each other; break the cycles so activations
    # are freed by refcounting instead of waiting for the cyclic collector
    for node in tape.nodes:
        node.parents = ()
        node.backward_fn = None
        node.grad = None
    tape.nodes.clear()
    tape.leaves.clear()


def grad(fn: Callable[[], Tensor], params: Iterable[Parameter]) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``fn`` on a fresh tape and return (loss value, gradients)."""
    params = list(params)
    with Tape():
        loss = fn()
    return loss.item(), backward(loss, params)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` must be deterministic; it is evaluated twice up front and a
    mismatch raises. With ``max_entries``, a random subset of entries per
    parameter is probed. The error is ``|g - num| / max(|g|, |num|, floor)``;
    the floor keeps exactly-zero gradients (attention key biases, say) from
    turning round-off in the difference quotient into a huge ratio.
    """
    if step <= 0:
        raise ValueError("finite_difference_check: step must be positive")
    params = [p for p in params if p.trainable]
    if not params:
        return 0.0
    with no_grad():
        v1 = loss_fn().item()
        v2 = loss_fn().item()
    if v1 != v2:
        raise RuntimeError("finite_difference_check: loss is not deterministic")
    for p in params:
        p.zero_grad()
    _, grads = grad(loss_fn, params)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(flat.size, max_entries, replace=False)
        g = grads[p.name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                up = loss_fn().item()
            flat[i] = orig - step
            with no_grad():
                down = loss_fn().item()
            flat[i] = orig
            num = (up - down) / (2 * step)
            worst = max(worst, abs(g[i] - num) / max(abs(g[i]), abs(num), floor))
    return worst


# ---------------------------------------------------------------- checkpoints
#
# Layout (little endian):
#   8 bytes magic "FACTCKPT", uint32 format version, uint32 record count, then
#   per record: uint32 name length, utf-8 name, uint8 trainable, uint32 ndim,
#   ndim x uint64 dims, prod(dims) x float64 row-major values.


def save_parameters(path, params: Iterable[Parameter]):
    params = list(params)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for p in params:
            name = p.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BI", int(p.trainable), p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_parameters(path) -> dict[str, Parameter]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        trainable, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape)
        off += 8 * size
        out[name] = Parameter(name, data.copy(), bool(trainable))
    return out
