"""Reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the active :class:`Tape` when any input
requires a gradient. Outside a tape nothing is recorded, which is how decoding
runs without bookkeeping overhead.

Broadcasting is limited to equal shapes, scalars, and trailing-dimension
matches (a ``[d]`` bias against a ``[b, d]`` activation). Masking by a
constant array goes through :func:`where`.
"""
import os
import struct
import tempfile
import threading
from contextlib import contextmanager

import numpy as np

from . import kernels


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


_local = threading.local()


def _stack():
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape():
    stack = _stack()
    return stack[-1] if stack else None


@contextmanager
def no_grad():
    """Suspend recording inside an active tape."""
    _stack().append(None)
    try:
        yield
    finally:
        _stack().pop()


class Tape:
    """Ordered record of operations; creation order is a topological order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss):
        backward(loss, self)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, inputs, backward_fn):
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append((out, inputs, backward_fn))
    return out


def backward(loss, tape=None):
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    Gradients accumulate by summation, both for nodes used more than once and
    across repeated calls on leaves that were not zeroed in between.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise UsageError("backward() needs an active or explicit tape")
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for out, inputs, fn in reversed(tape.nodes):
        if out.grad is None:
            continue
        grads = fn(out.grad)
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(g, dtype=np.float64, copy=True).reshape(inp.shape)
            else:
                inp.grad = inp.grad + g.reshape(inp.shape)


# ---------------------------------------------------------------------------
# elementwise and broadcasting


def _check_broadcast(sa, sb):
    if sa == sb:
        return sa
    if len(sb) <= len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(f"shapes {sa} and {sb} are not broadcast-compatible")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(x):
    return _record(-x.data, (x,), lambda g: (-g,))


def sigmoid(x):
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def exp(x):
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log of a nonpositive value")
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def safe_log(x, floor=-1e10):
    """log with nonpositive entries mapped to ``floor`` (zero gradient there)."""
    d = x.data
    pos = d > 0
    out = np.full_like(d, floor)
    out[pos] = np.log(d[pos])

    def bw(g):
        gi = np.zeros_like(d)
        gi[pos] = g[pos] / d[pos]
        return (gi,)

    return _record(out, (x,), bw)


def where(mask, a, b):
    """``a`` where ``mask`` is true, else ``b``; mask is a constant array."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"where() branches differ: {a.shape} vs {b.shape}")
    m = np.broadcast_to(np.asarray(mask, dtype=np.float64), a.shape)
    return _record(m * a.data + (1.0 - m) * b.data, (a, b),
                   lambda g: (g * m, g * (1.0 - m)))


def stop_gradient(x):
    return Tensor(x.data)


def straight_through(hard, relaxed):
    """Value is ``hard`` exactly; the gradient passes to ``relaxed`` unchanged."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != relaxed.shape:
        raise DimensionError(f"hard {hard.shape} and relaxed {relaxed.shape} differ")
    return _record(hard.copy(), (relaxed,), lambda g: (g,))


def dropout(x, rate, rng, train=True):
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ConfigurationError(f"dropout rate must be < 1, got {rate}")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# structural


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _record(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum(x, axis=None):
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape),)

    return _record(out, (x,), bw)


def mean(x, axis=None):
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def reshape(x, shape):
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x):
    if x.ndim != 2:
        raise DimensionError(f"transpose expects 2-d, got {x.shape}")
    return _record(x.data.T, (x,), lambda g: (g.T,))


def take(x, idx):
    def bw(g):
        gi = np.zeros_like(x.data)
        np.add.at(gi, idx, g)
        return (gi,)

    return _record(x.data[idx], (x,), bw)


def pick(x, ids):
    """Row-wise selection ``x[i, ids[i]]`` of a 2-d tensor."""
    ids = np.asarray(ids, dtype=np.int64)
    return take(x, (np.arange(x.shape[0]), ids))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return _record(data, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------------------
# normalizers and embeddings


def softmax(x):
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(out, (x,),
                   lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x):
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return _record(out, (x,), lambda g: (g - sm * g.sum(axis=-1, keepdims=True),))


def embed(E, tokens):
    """Rows of ``E`` for integer ids, or ``tokens @ E`` for (relaxed) one-hot rows."""
    if isinstance(tokens, Tensor):
        if tokens.shape[-1] != E.shape[0]:
            raise DimensionError(f"one-hot width {tokens.shape[-1]} vs vocabulary {E.shape[0]}")
        if tokens.ndim == 2:
            return matmul(tokens, E)
        flat = reshape(tokens, (-1, E.shape[0]))
        return reshape(matmul(flat, E), tokens.shape[:-1] + (E.shape[1],))
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise IndexError(f"token id out of range for vocabulary of size {E.shape[0]}")

    def bw(g):
        gE = np.zeros_like(E.data)
        np.add.at(gE, ids.reshape(-1), g.reshape(-1, E.shape[1]))
        return (gE,)

    return _record(E.data[ids], (E,), bw)


class BatchNormStats:
    def __init__(self, dim):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)


def batch_norm(x, gamma, beta, stats=None, train=True, eps=1e-5, momentum=0.1,
               update_stats=True):
    """Per-feature normalization of a ``[batch, features]`` tensor.

    Training mode uses biased batch variance for the output and folds the
    unbiased variance into the running estimate.
    """
    if x.ndim != 2:
        raise DimensionError(f"batch_norm expects [batch, features], got {x.shape}")
    b = x.shape[0]
    if train:
        if b < 2:
            raise ConfigurationError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        if stats is not None and update_stats:
            stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
            stats.var = (1.0 - momentum) * stats.var + momentum * var * b / (b - 1)
    else:
        if stats is None:
            raise ConfigurationError("batch_norm in infer mode needs running stats")
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dbeta = g.sum(axis=0)
        dgamma = (g * xhat).sum(axis=0)
        dxhat = g * gamma.data
        if train:
            dx = inv / b * (b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# fused recurrent pieces


def gru_gates(gx, gh, h):
    """GRU state update from gate pre-activations.

    ``gx`` and ``gh`` are ``[b, 3H]`` input and recurrent projections laid out
    as [reset | update | candidate]; ``h`` is the previous state ``[b, H]``.
    """
    if gx.shape != gh.shape or gx.shape[1] != 3 * h.shape[1] or gx.shape[0] != h.shape[0]:
        raise DimensionError(f"gru_gates shapes gx={gx.shape} gh={gh.shape} h={h.shape}")
    ghd = np.ascontiguousarray(gh.data)
    hd = np.ascontiguousarray(h.data)
    out, cache = kernels.gru_gates_forward(np.ascontiguousarray(gx.data), ghd, hd)

    def bw(g):
        return kernels.gru_gates_backward(np.ascontiguousarray(g), ghd, hd, cache)

    return _record(out, (gx, gh, h), bw)


def attention(hidden, states, mask=None):
    """Dot-product attention of ``hidden [b, H]`` over ``states [b, m, H]``.

    ``mask [b, m]`` marks valid memory positions. Returns ``(context, weights)``
    where ``weights`` is a plain array.
    """
    if states.ndim != 3 or hidden.ndim != 2 or states.shape[0] != hidden.shape[0] \
            or states.shape[2] != hidden.shape[1]:
        raise DimensionError(f"attention shapes hidden={hidden.shape} states={states.shape}")
    S, q = states.data, hidden.data
    scores = np.einsum("bmh,bh->bm", S, q)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=1, keepdims=True)
    ctx = np.einsum("bm,bmh->bh", w, S)

    def bw(g):
        dw = np.einsum("bmh,bh->bm", S, g)
        ds = w * (dw - (dw * w).sum(axis=1, keepdims=True))
        dS = w[:, :, None] * g[:, None, :] + ds[:, :, None] * q[:, None, :]
        dq = np.einsum("bm,bmh->bh", ds, S)
        return dq, dS

    return _record(ctx, (hidden, states), bw), w


# ---------------------------------------------------------------------------
# parameters, optimizer, checkpoints


class ParamStore:
    """Named trainable tensors plus their RMSprop accumulators."""

    def __init__(self):
        self.params = {}
        self.acc = {}

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self.params[name] = t
        self.acc[name] = np.zeros_like(t.data)
        return t

    def share(self, name, tensor):
        """Register a tensor owned by another store (own accumulator here)."""
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        self.params[name] = tensor
        self.acc[name] = np.zeros_like(tensor.data)
        return tensor

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return sorted(self.params)

    def items(self):
        return [(n, self.params[n]) for n in self.names()]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    @contextmanager
    def frozen(self, names=None):
        """Temporarily stop gradients from reaching these parameters (or just ``names``)."""
        names = list(self.params) if names is None else list(names)
        saved = {n: self.params[n].requires_grad for n in names}
        for n in names:
            self.params[n].requires_grad = False
        try:
            yield self
        finally:
            for n, flag in saved.items():
                self.params[n].requires_grad = flag

    def num_values(self):
        return int(np.sum([t.size for t in self.params.values()]))


def rmsprop_step(store, lr=1e-3, decay=0.9, eps=1e-8):
    """One RMSprop update over every parameter; gradients are zeroed after."""
    if all(t.grad is None for t in store.params.values()):
        raise UsageError("rmsprop_step called with no gradients populated")
    for name in store.names():
        t = store.params[name]
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        acc = store.acc[name]
        acc *= decay
        acc += (1.0 - decay) * g * g
        t.data -= lr * g / (np.sqrt(acc) + eps)
        t.grad = None


def clip_weights(store, c, exclude=()):
    """Clamp parameters into ``[-c, c]`` in place, skipping names with an excluded prefix."""
    if c <= 0:
        raise ConfigurationError(f"clip constant must be positive, got {c}")
    for name, t in store.params.items():
        if any(name.startswith(p) for p in exclude):
            continue
        np.clip(t.data, -c, c, out=t.data)


CHECKPOINT_MAGIC = b"ADVNLGCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays):
    """Write named float64 arrays: version, then name/shape/little-endian values per entry."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes(order="C"))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    return out
