"""A small reverse-mode autodiff engine on float64 numpy arrays.

Every differentiable op appends one node to the active thread's gradient tape.
``backward`` walks the tape in reverse, so each node is visited once, and
clears it afterwards. Parameters are plain leaf ``Tensor`` objects created with
``requires_grad=True``; their ``grad`` accumulates across calls until reset.
"""

import contextlib
import threading

import numpy as np

from . import _kernels

PROB_EPS = 1e-7
MASK_VALUE = -1e9


class NonFiniteError(FloatingPointError):
    pass


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradientTape:
    """Append-only record of ops; inputs of a node always precede it."""

    def __init__(self):
        self.nodes = []

    def record(self, out, parents, backward):
        self.nodes.append(_Node(out, parents, backward))

    def clear(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = GradientTape()
        _local.enabled = True
    return _local


def get_tape():
    return _state().tape


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.enabled
    st.enabled = False
    try:
        yield
    finally:
        st.enabled = prev


def grad_enabled():
    return _state().enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _make(data, parents, backward):
    """Wrap an op result and record it on the tape when any input needs grad."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("non-finite value produced by forward op")
    st = _state()
    needs = st.enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        st.tape.record(out, parents, backward)
    return out


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if not loss.requires_grad:
        tape.clear()
        raise ValueError("loss is not on the gradient tape")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape.nodes):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            for p, gp in zip(node.parents, grads):
                if gp is None or not p.requires_grad:
                    continue
                gp = _unbroadcast(gp, p.shape)
                p.grad = gp.copy() if p.grad is None else p.grad + gp
            # intermediates are not needed after their node fires
            node.out.grad = None if node.out is not loss else node.out.grad
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def power(a, p):
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a, axis):
    """Max along ``axis``; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    arg = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (ga,)

    return _make(out, (a,), bw)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def index(a, idx):
    a = as_tensor(a)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), bw)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def embedding(weight, ids):
    """Row lookup ``weight[ids]`` with scatter-add gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    return index(weight, ids)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad = a.data if a.ndim > 1 else a.data[None, :]
    bd = b.data if b.ndim > 1 else b.data[:, None]
    if ad.shape[-1] != bd.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        out = ad @ bd
    except ValueError as exc:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        ga = _unbroadcast(ga, ad.shape).reshape(a.shape)
        gb = _unbroadcast(gb, bd.shape).reshape(b.shape)
        return ga, gb

    if a.ndim == 1:
        out = out[..., 0, :]

        def bw_vec(g, _inner=bw):
            return _inner(np.expand_dims(g, -2))
        fn = bw_vec
    elif b.ndim == 1:
        out = out[..., 0]

        def bw_col(g, _inner=bw):
            return _inner(g[..., None])
        fn = bw_col
    else:
        fn = bw
    return _make(out, (a, b), fn)


def tag_bilinear(h, w, tags):
    """Scores ``h_i . w[tags_ij] . h_j`` over a batch of node sets.

    ``h`` is [B, k, d], ``w`` is [R, d, d], ``tags`` is an int [B, k, k] array
    selecting a relation matrix per ordered node pair; negative tags give 0.
    """
    h, w = as_tensor(h), as_tensor(w)
    tags = np.asarray(tags, dtype=np.int64)
    out = _kernels.tag_bilinear(h.data, w.data, tags)
    return _make(out, (h, w), lambda g: _kernels.tag_bilinear_backward(g, h.data, w.data, tags))


# ---------------------------------------------------------------------------
# normalizers
# ---------------------------------------------------------------------------

def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def masked_softmax(x, support, axis=-1):
    """Softmax restricted to entries where ``support`` is nonzero.

    Entries outside the support are exactly 0. Every slice along ``axis``
    must contain at least one supported entry.
    """
    x = as_tensor(x)
    support = np.asarray(support) != 0
    if not support.any(axis=axis).all():
        raise ValueError("masked_softmax: a row has empty support")
    z = np.where(support, x.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.where(support, np.exp(z), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if n < 2:
        raise ValueError("layer_norm needs a last axis of size >= 2")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, g * xhat, g

    return _make(out, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits, targets, pad_id=None):
    """Mean negative log-likelihood of ``targets`` over non-PAD positions.

    ``logits`` has shape [..., V]; ``targets`` holds ints with the leading shape.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    v = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError(f"cross_entropy: target out of range [0, {v})")
    keep = np.ones(targets.shape, bool) if pad_id is None else targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: no non-PAD targets")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        return (g * (p - onehot) * keep[..., None] / count,)

    return _make(np.asarray(loss), (logits,), bw)


def asymmetric_loss(probs, labels, gamma_pos=0.0, gamma_neg=4.0, clip=0.05, eps=PROB_EPS):
    """Multi-label loss with separate focusing exponents and a negative margin.

    Positives contribute ``-(1-p)^gamma_pos * log p``; negatives contribute
    ``-p_m^gamma_neg * log(1-p_m)`` with ``p_m = max(p - clip, 0)``. Returns
    the mean over all entries. Probabilities are clamped to [eps, 1-eps].
    """
    probs = as_tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ValueError(f"asymmetric_loss: labels {y.shape} vs probs {probs.shape}")
    raw = probs.data
    inside = (raw >= eps) & (raw <= 1 - eps)
    p = np.clip(raw, eps, 1 - eps)

    q = 1.0 - p
    pos_w = q ** gamma_pos
    pos = -pos_w * np.log(p)
    dpos = -pos_w / p
    if gamma_pos != 0:
        dpos = dpos + gamma_pos * q ** (gamma_pos - 1) * np.log(p)

    pm = np.maximum(p - clip, 0.0) if clip > 0 else p
    active = pm > 0
    neg_w = np.where(active, pm, 0.0) ** gamma_neg if gamma_neg != 0 else np.ones_like(pm)
    log_q = np.log(1.0 - pm)
    neg = -neg_w * log_q
    dneg = neg_w / (1.0 - pm)
    if gamma_neg != 0:
        safe = np.where(active, pm, 1.0)
        dneg = dneg - gamma_neg * safe ** (gamma_neg - 1) * log_q
    dneg = np.where(active, dneg, 0.0)

    n = y.size
    loss = (y * pos + (1 - y) * neg).sum() / n

    def bw(g):
        return (g * inside * (y * dpos + (1 - y) * dneg) / n,)

    return _make(np.asarray(loss), (probs,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(f, inputs, eps=1e-5, coords=None):
    """Central-difference gradient of scalar ``f(*inputs)`` w.r.t. each input.

    ``coords`` optionally restricts evaluation to a list of (input index, flat
    index) pairs; other entries are left at NaN.
    """
    out = [np.full(t.shape, np.nan) for t in inputs]
    if coords is None:
        coords = [(i, j) for i, t in enumerate(inputs) for j in range(t.size)]
    with no_grad():
        for i, j in coords:
            flat = inputs[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            fp = float(f(*inputs).data)
            flat[j] = orig - eps
            fm = float(f(*inputs).data)
            flat[j] = orig
            out[i].reshape(-1)[j] = (fp - fm) / (2 * eps)
    return out


def analytic_grad(f, inputs):
    saved = [(t.requires_grad, t.grad) for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    get_tape().clear()
    loss = f(*inputs)
    backward(loss)
    grads = [t.grad if t.grad is not None else np.zeros(t.shape) for t in inputs]
    for t, (rg, g) in zip(inputs, saved):
        t.requires_grad = rg
        t.grad = g
    return grads


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(f, x, eps=1e-5, coords=None):
    """Max over coordinates of |analytic - numeric| / max(|a|, |n|, 1e-8).

    ``x`` is a Tensor or a sequence of Tensors passed positionally to ``f``,
    which must return a scalar Tensor.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    ana = analytic_grad(f, inputs)
    num = numeric_grad(f, inputs, eps, coords)
    if coords is None:
        return float(max(relative_error(a, n).max(initial=0.0) for a, n in zip(ana, num)))
    errs = [relative_error(ana[i].reshape(-1)[j], num[i].reshape(-1)[j]) for i, j in coords]
    return float(max(errs, default=0.0))
