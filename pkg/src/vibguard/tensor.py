"""Dense float32 tensors with define-by-run reverse-mode autodiff.

Every op returns a new :class:`Tensor` that remembers its inputs and a
closure computing the vector-Jacobian product. :func:`backward` walks the
recorded graph in reverse creation order.

Layout conventions: images are NCHW, dense layers act on (N, F).
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DTYPE = np.float32

_seq = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, attack bookkeeping)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "parents", "_vjp", "seq")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), vjp=None):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self._vjp = vjp
        self.seq = next(_seq)

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return not self.parents

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def backward(self, grad=None):
        return backward(self, grad)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind, arr):
    # float64 accumulation: a finite f32 array can never overflow this sum
    if not np.isfinite(arr.sum(dtype=np.float64)):
        raise NonFiniteError(f"{kind}: produced NaN/Inf")


def _make(kind, out, inputs, vjp):
    _check_finite(kind, out)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        return Tensor(out, requires_grad=True, op=kind, parents=tuple(inputs), vjp=vjp)
    return Tensor(out, op=kind)


def _shape_error(kind, a, b):
    return ShapeError(f"{kind}: incompatible shapes {tuple(a)} and {tuple(b)}")


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise _shape_error(kind, a.shape, b.shape) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    if np.isscalar(b):
        return scale(a, b)
    if np.isscalar(a):
        return scale(b, a)
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a, c):
    a = as_tensor(a)
    c = DTYPE(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return _make("relu", np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def tsum(x, axis=None):
    x = as_tensor(x)
    shape = x.shape
    out = x.data.sum(axis=axis, dtype=DTYPE)

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(DTYPE),)

    return _make("sum", np.asarray(out, dtype=DTYPE), (x,), vjp)


def mean(x):
    x = as_tensor(x)
    return scale(tsum(x), 1.0 / x.data.size)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def add_bias(x, b):
    """Add a per-feature (2-D input) or per-channel (4-D input) bias."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise _shape_error("add_bias", x.shape, b.shape)
    if x.data.ndim == 2:
        return _make("add_bias", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))
    return _make("add_bias", x.data + b.data[None, :, None, None], (x, b),
                 lambda g: (g, g.sum(axis=(0, 2, 3))))


def conv2d(x, w, padding="valid"):
    """Stride-1 2-D cross-correlation. x: (N, C, H, W); w: (O, C, kh, kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise _shape_error("conv2d", x.shape, w.shape)
    o, c, kh, kw = w.shape
    if padding == "valid":
        pad = 0
    elif padding == "same":
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"conv2d: 'same' padding needs an odd square kernel, got {(kh, kw)}")
        pad = kh // 2
    else:
        raise ValueError(f"conv2d: unknown padding {padding!r}")
    n, _, h, wd = x.shape
    ho, wo = _kernels.conv_out_size(h, wd, kh, kw, pad)
    if ho < 1 or wo < 1:
        raise _shape_error("conv2d", x.shape, w.shape)
    cols = _kernels.im2col(x.data, kh, kw, pad)
    wmat = w.data.reshape(o, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    xshape = x.shape

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = _kernels.col2im(gm @ wmat, xshape, kh, kw, pad) if x.requires_grad else None
        return gx, gw

    return _make("conv2d", np.ascontiguousarray(out), (x, w), vjp)


def maxpool2x2(x):
    x = as_tensor(x)
    if x.data.ndim != 4 or x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"maxpool2x2: need (N, C, H>=2, W>=2) input, got {x.shape}")
    out, arg = _kernels.maxpool2(x.data)
    xshape = x.shape
    return _make("maxpool2x2", out, (x,), lambda g: (_kernels.maxpool2_backward(g, arg, xshape),))


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", old, shape) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def flatten(x):
    x = as_tensor(x)
    return reshape(x, (x.shape[0], -1))


# ---------------------------------------------------------------- losses

def log_softmax(x):
    """Row-wise log-softmax of a (N, C) tensor."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"log_softmax: expected (N, C), got {x.shape}")
    out = _log_softmax_data(x.data)
    p = np.exp(out)
    return _make("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def _log_softmax_data(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_data(z):
    """Row softmax of a plain array, rounded exactly as the log-softmax op rounds."""
    return np.exp(_log_softmax_data(np.asarray(z, dtype=DTYPE)))


def nll_loss(logp, labels):
    """Mean negative log-likelihood of integer ``labels`` under row log-probs."""
    logp = as_tensor(logp)
    labels = np.asarray(labels, dtype=np.intp)
    if logp.data.ndim != 2 or labels.shape != (logp.shape[0],):
        raise _shape_error("nll_loss", logp.shape, labels.shape)
    n = labels.shape[0]
    rows = np.arange(n)
    out = -logp.data[rows, labels].mean(dtype=np.float64)

    def vjp(g):
        d = np.zeros_like(logp.data)
        d[rows, labels] = -g / n
        return (d,)

    return _make("nll_loss", np.asarray(out, dtype=DTYPE), (logp,), vjp)


def check_probabilities(p, atol=1e-4):
    p = np.asarray(p)
    if (p < 0).any():
        raise ValueError("teacher probabilities must be non-negative")
    s = p.sum(axis=-1)
    if not np.allclose(s, 1.0, rtol=0, atol=atol):
        raise ValueError(f"teacher probabilities must sum to 1 (+-{atol}); got sums in "
                         f"[{s.min():.6g}, {s.max():.6g}]")


def kl_div(teacher_probs, student_logp):
    """Batch mean of KL(teacher || student); 0*log 0 is taken as 0."""
    q = as_tensor(student_logp)
    p = np.asarray(teacher_probs, dtype=DTYPE)
    if p.shape != q.shape:
        raise _shape_error("kl_div", p.shape, q.shape)
    check_probabilities(p)
    if p.ndim == 1:
        p = p[None]
        q = reshape(q, (1, -1))
    n = p.shape[0]
    pos = p > 0
    logp = np.zeros_like(p)
    logp[pos] = np.log(p[pos])
    per_row = np.where(pos, p * (logp - q.data), 0.0).sum(axis=1, dtype=np.float64)
    out = per_row.mean()
    return _make("kl_div", np.asarray(out, dtype=DTYPE), (q,), lambda g: (-g * p / n,))


def kl_div_logits(teacher_probs, logits):
    """``kl_div(teacher_probs, log_softmax(logits))`` with a fused gradient.

    The gradient with respect to the logits is (softmax(z) - p) / n, which
    is exactly zero when p equals :func:`softmax_data` of the same logits.
    Going through the log-softmax node instead leaves float32 residue of
    order 1e-8, and Adam rescales that into full-size steps.
    """
    z = as_tensor(logits)
    p = np.asarray(teacher_probs, dtype=DTYPE)
    if p.ndim != 2 or p.shape != z.shape:
        raise _shape_error("kl_div_logits", p.shape, z.shape)
    check_probabilities(p)
    logq = _log_softmax_data(z.data)
    q = np.exp(logq)
    n = p.shape[0]
    pos = p > 0
    logp = np.zeros_like(p)
    logp[pos] = np.log(p[pos])
    out = np.where(pos, p * (logp - logq), 0.0).sum(axis=1, dtype=np.float64).mean()
    return _make("kl_div_logits", np.asarray(out, dtype=DTYPE), (z,), lambda g: (g * (q - p) / n,))


# ---------------------------------------------------------------- backward

@dataclass
class Graph:
    """Nodes reachable from a root, in topological (creation) order."""

    nodes: list = field(default_factory=list)

    @classmethod
    def trace(cls, root):
        seen = set()
        nodes = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            nodes.append(t)
            stack.extend(p for p in t.parents if p.requires_grad)
        nodes.sort(key=lambda t: t.seq)
        return cls(nodes)

    @property
    def leaves(self):
        return [t for t in self.nodes if t.is_leaf]

    def records(self):
        ids = {id(t): k for k, t in enumerate(self.nodes)}
        return [(t.op, [ids[id(p)] for p in t.parents if id(p) in ids], t.shape) for t in self.nodes]


def backward(loss, grad=None):
    """Reverse-mode sweep from ``loss``.

    ``loss`` must be scalar unless an output cotangent ``grad`` is supplied
    (vector-Jacobian product). Gradients are *accumulated* into ``.grad`` of
    every leaf that requires grad; the mapping ``{leaf: grad}`` is returned.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if not loss.requires_grad:
        raise GraphError(f"loss ({loss.op}) is detached: no input requires grad")
    if grad is None:
        if loss.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    else:
        grad = np.asarray(grad, dtype=DTYPE)
        if grad.shape != loss.shape:
            raise _shape_error("backward", loss.shape, grad.shape)

    graph = Graph.trace(loss)
    grads = {id(loss): grad}
    out = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            out[node] = node.grad
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            k = id(parent)
            grads[k] = grads[k] + pg if k in grads else pg
    return out
