"""Dense tensors with reverse-mode differentiation.

A ``Tensor`` wraps a numpy array. Every op records its parents and a closure
that pushes the output gradient back to them; ``Tensor.backward`` walks the
graph in reverse topological order. Only the shapes the EmoCaps graph needs
are supported: leading batch axes on elementwise/normalisation ops and on the
left operand of ``matmul``.
"""
import contextlib
import math
import threading

import numpy as np

from . import kernels
from .errors import DimensionError, NumericError, UsageError

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (cheaper forward passes)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind not in "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor."""
        if grad is None:
            if self.data.size != 1:
                raise UsageError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar for the few places it reads better
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _needs_grad(t):
    return t.requires_grad or t._backward is not None


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _make(data, parents, backward):
    out = Tensor(data)
    if grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Rng:
    """Seeded random stream; PCG64 makes the draws platform independent."""

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low, high, shape, dtype=DEFAULT_DTYPE):
        return self._gen.uniform(low, high, size=shape).astype(dtype, copy=False)

    def normal(self, shape, scale=1.0, dtype=DEFAULT_DTYPE):
        return (self._gen.standard_normal(size=shape) * scale).astype(dtype, copy=False)

    def random(self, shape):
        return self._gen.random(size=shape)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def spawn(self, key):
        """Independent child stream derived from this seed and ``key``."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        child = Rng.__new__(Rng)
        child.seed = int(seq.generate_state(1, dtype=np.uint64)[0])
        child._gen = np.random.Generator(np.random.PCG64(seq))
        return child


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x):
    x = as_tensor(x)
    s = kernels._sigmoid(x.data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x):
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def dropout(x, rate, rng, training):
    """Inverted dropout: survivors scaled by 1/(1-rate); identity when not training."""
    if not 0.0 <= rate < 1.0:
        raise UsageError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- shape ops

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x, axes):
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat_last_axis(tensors):
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_last_axis: leading shapes differ, {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=-1)

    def backward(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(tensors)))

    return _make(out, tensors, backward)


def slice_last_axis(x, start, stop):
    x = as_tensor(x)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _make(x.data[..., start:stop], (x,), backward)


def concat_rows(tensors):
    """Stack tensors along axis 0."""
    tensors = [as_tensor(t) for t in tensors]
    tail = tensors[0].shape[1:]
    for t in tensors[1:]:
        if t.shape[1:] != tail:
            raise DimensionError(f"concat_rows: trailing shapes differ, {tensors[0].shape} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[0] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=0)

    def backward(g):
        return tuple(g[bounds[k]:bounds[k + 1]] for k in range(len(tensors)))

    return _make(out, tensors, backward)


def take_rows(x, index):
    """``x[index]`` along axis 0; gradients scatter-add back."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def mean_axis(x, axis):
    x = as_tensor(x)
    n = x.shape[axis]

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return _make(x.data.mean(axis=axis), (x,), backward)


def sum_all(x):
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    """``a @ b`` where ``a`` is ``(k,)`` or ``(..., m, k)`` and ``b`` is ``(k, n)`` or ``(..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 1 and b.data.ndim == 2:
        return reshape(matmul(reshape(a, (1, a.shape[0])), b), (b.shape[1],))
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    if b.data.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch shapes differ, {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.data.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- normalisation

def softmax_rows(x):
    """Softmax over the last axis, max-subtracted for stability."""
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-5):
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last axis {d} does not match gamma {gamma.shape} / beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx_hat = g * gamma.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), backward)


def cross_entropy(logits, label):
    """Mean of ``-log softmax(logits)[label]`` over rows.

    ``logits`` is ``(m,)`` with an integer label, or ``(N, m)`` with ``N`` labels.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    z = logits.data.reshape(-1, logits.shape[-1])
    labels = np.atleast_1d(np.asarray(label, dtype=np.intp))
    if labels.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: {z.shape[0]} rows but {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise UsageError(f"cross_entropy: label out of range for {z.shape[1]} classes")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(z.shape[0])
    n = z.shape[0]
    loss = (lse - z[rows, labels]).sum() / n

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        p *= g / n
        return (p.reshape(logits.shape) if not single else p[0],)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# ---------------------------------------------------------------- recurrence

def lstm_cell(x, h, c, params):
    """One LSTM step built from primitive ops; gate blocks ordered i, f, g, o."""
    w_ih, w_hh, b = params["W_ih"], params["W_hh"], params["b"]
    H = w_hh.shape[0]
    if w_ih.shape[-1] != 4 * H or w_hh.shape != (H, 4 * H) or b.shape != (4 * H,):
        raise DimensionError(
            f"lstm_cell: inconsistent params W_ih {w_ih.shape}, W_hh {w_hh.shape}, b {b.shape}")
    if x.shape[-1] != w_ih.shape[0] or h.shape[-1] != H or c.shape[-1] != H:
        raise DimensionError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} vs W_ih {w_ih.shape}")
    x2 = reshape(x, (-1, x.shape[-1]))
    z = add(add(matmul(x2, w_ih), matmul(reshape(h, (-1, H)), w_hh)), b)
    i = sigmoid(slice_last_axis(z, 0, H))
    f = sigmoid(slice_last_axis(z, H, 2 * H))
    g = tanh(slice_last_axis(z, 2 * H, 3 * H))
    o = sigmoid(slice_last_axis(z, 3 * H, 4 * H))
    c_new = add(mul(f, reshape(c, (-1, H))), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return reshape(h_new, h.shape), reshape(c_new, c.shape)


def lstm_recurrence(xp, w_hh):
    """Run the LSTM recurrence over ``xp`` = ``(B, L, 4H)`` input projections.

    Zero initial state. Forward and BPTT use the fused kernels in
    :mod:`emocaps.kernels`. Returns hidden states ``(B, L, H)``.
    """
    xp, w_hh = as_tensor(xp), as_tensor(w_hh)
    H = w_hh.shape[0]
    if xp.data.ndim != 3 or xp.shape[-1] != 4 * H or w_hh.shape != (H, 4 * H):
        raise DimensionError(f"lstm_recurrence: xp {xp.shape} incompatible with W_hh {w_hh.shape}")
    xp_t = np.ascontiguousarray(np.swapaxes(xp.data, 0, 1))
    w = np.ascontiguousarray(w_hh.data)
    hs, cs, gates = kernels.lstm_forward(xp_t, w)

    def backward(g):
        dhs = np.ascontiguousarray(np.swapaxes(g, 0, 1))
        dxp, dw = kernels.lstm_backward(dhs, hs, cs, gates, w)
        return np.swapaxes(dxp, 0, 1), dw

    return _make(np.swapaxes(hs, 0, 1), (xp, w_hh), backward)


def lstm_sequence(x, params):
    """LSTM over ``x`` = ``(B, L, d_in)`` with zero initial state."""
    xp = add(matmul(x, params["W_ih"]), params["b"])
    return lstm_recurrence(xp, params["W_hh"])


# ---------------------------------------------------------------- init / optim

def init_weight(rng, fan_in, fan_out, dtype=DEFAULT_DTYPE, name=None):
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, (fan_in, fan_out), dtype), requires_grad=True,
                  name=name)


def init_const(value, n, dtype=DEFAULT_DTYPE, name=None):
    return Tensor(np.full((n,), value, dtype=dtype), requires_grad=True, name=name)


class AdamState:
    def __init__(self, params, betas=(0.9, 0.999), eps=1e-8):
        self.betas = betas
        self.eps = eps
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params, state, lr):
    """In-place bias-corrected Adam update of every tensor in ``params``."""
    missing = [k for k, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"adam_step: no gradient for {', '.join(sorted(missing))}")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = p.grad
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


def clip_grad_norm(params, max_norm):
    """Scale all grads so their global L2 norm is at most ``max_norm``; returns the norm.

    ``max_norm`` of None or <= 0 disables clipping.
    """
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params.values()
                          if p.grad is not None))
    if max_norm is not None and 0 < max_norm < total:
        factor = max_norm / (total + 1e-12)
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return total


# ---------------------------------------------------------------- gradient check

def finite_difference_check(f, params, h=1e-5, return_details=False, grad_hook=None):
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``params`` maps names to leaf tensors that ``f`` reads. For each tensor
    the error is ``|a - c| / (|a| + |c| + 1e-12)`` with L2 norms taken over
    the tensor; a scalar parameter reduces to the entrywise formula. Returns
    the max over parameters, or ``(max, {name: error})`` with
    ``return_details``. ``grad_hook`` may rewrite the ``{name: analytic}``
    dict before comparison (used for negative controls).
    """
    for p in params.values():
        p.grad = None
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("finite_difference_check: f is not finite at the base point")
    out.backward()
    analytic_grads = {name: np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                      for name, p in params.items()}
    if grad_hook is not None:
        grad_hook(analytic_grads)
    errors = {}
    with no_grad():
        for name, p in params.items():
            analytic = analytic_grads[name]
            numeric = np.empty_like(p.data)
            flat = p.data.reshape(-1)
            nflat = numeric.reshape(-1)
            for idx in range(flat.size):
                old = flat[idx]
                flat[idx] = old + h
                fp = float(f().data)
                flat[idx] = old - h
                fm = float(f().data)
                flat[idx] = old
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError(f"finite_difference_check: f not finite near {name}[{idx}]")
                nflat[idx] = (fp - fm) / (2.0 * h)
            diff = np.linalg.norm(analytic - numeric)
            errors[name] = float(diff / (np.linalg.norm(analytic) + np.linalg.norm(numeric) + 1e-12))
    worst = max(errors.values()) if errors else 0.0
    return (worst, errors) if return_details else worst
