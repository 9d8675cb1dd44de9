"""Dense-tensor engine with tape-based reverse-mode differentiation.

A Tensor wraps a numpy array plus parent links and a backward closure; the
implicit graph of parent links is the tape. Calling ``backward`` on a scalar
root walks the tape in reverse topological order and accumulates gradients
into every ``requires_grad`` ancestor. Branches created through ``detach``
are cut from the tape and receive no gradient.

Float64 is the default dtype so finite-difference checks have headroom;
``set_default_dtype`` switches to float32 for speed at reduced precision.

Not thread-safe: a graph must be built and differentiated on one thread.
Distinct graphs on distinct threads are independent.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np
from scipy import special as sp_special

from .errors import ContractError, DegenerateInputError, DimensionError, ParameterError

_DTYPE = np.float64
_GRAD_ENABLED = True

# Probabilities are clamped to this floor inside logarithms so saturated
# softmax/sigmoid outputs never produce -inf.
LOG_EPS = 1e-12


def set_default_dtype(dtype) -> None:
    global _DTYPE
    if dtype not in (np.float32, np.float64):
        raise ParameterError(f"unsupported dtype {dtype!r}; use np.float32 or np.float64")
    _DTYPE = dtype


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A dense n-dimensional real array that can participate in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "_grad_borrowed", "_parents",
                 "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._grad_borrowed = False
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values, cut from the tape."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out._grad_borrowed = False
        out._parents = ()
        out._backward_fn = None
        out._op = "detach"
        return out

    def backward(self) -> None:
        backward(self)

    def _accum(self, arr) -> None:
        # the first contribution is kept by reference (it may be a shared or
        # read-only view, so it is never mutated in place); a second
        # contribution allocates the owned sum
        if self.grad is None:
            self.grad = arr
            self._grad_borrowed = True
        elif self._grad_borrowed:
            self.grad = self.grad + arr
            self._grad_borrowed = False
        else:
            self.grad += arr

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # operator sugar; scalars stay scalars instead of becoming constant nodes
    def __add__(self, other):
        return add_scalar(self, float(other)) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, float(other))

    def __sub__(self, other):
        return add_scalar(self, -float(other)) if _is_number(other) else sub(self, other)

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return scale(self, float(other)) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return scale(self, float(other))

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other)) if _is_number(other) else div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def _node(data, parents, backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._grad_borrowed = False
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every requires_grad ancestor of a scalar root.

    Interior nodes release their gradient buffers and tape links as soon as
    their backward step has run, so a graph supports one backward pass and
    peak memory stays near the forward footprint.
    """
    if root.data.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)
            node._backward_fn = None
            node._parents = ()
            if node is not root:
                node.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _node(data, (a, b), bwd, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), bwd, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bwd, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), bwd, "div")


def neg(a: Tensor) -> Tensor:
    def bwd(g):
        a._accum(-g)

    return _node(-a.data, (a,), bwd, "neg")


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a._accum(g * s)

    return _node(a.data * s, (a,), bwd, "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        a._accum(g)

    return _node(a.data + s, (a,), bwd, "add_scalar")


# ---------------------------------------------------------------------------
# matrix product


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # batched input against a shared weight: fold the batch into
                # one GEMM instead of reducing a batched product
                k = a.shape[-1]
                n = g.shape[-1]
                b._accum(np.matmul(a.data.reshape(-1, k).T, g.reshape(-1, n)))
            else:
                b._accum(_unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape))

    return _node(data, (a, b), bwd, "matmul")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    data = x.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g, x.shape))

    return _node(data, (x,), bwd, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    data = x.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g, x.shape) / count)

    return _node(data, (x,), bwd, "mean")


def reshape(x: Tensor, shape) -> Tensor:
    data = x.data.reshape(shape)

    def bwd(g):
        x._accum(g.reshape(x.shape))

    return _node(data, (x,), bwd, "reshape")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    data = x.data.swapaxes(a1, a2)

    def bwd(g):
        x._accum(g.swapaxes(a1, a2))

    return _node(data, (x,), bwd, "swapaxes")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _node(data, tuple(tensors), bwd, "concat")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select along axis 0 with an integer index array of any shape.

    Output shape is ``indices.shape + x.shape[1:]``; backward scatter-adds.
    Serves both embedding lookup and picking out masked positions.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("gather_rows needs integer indices")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError(
            f"gather index out of range [0, {x.shape[0]}) for shape {x.shape}"
        )
    data = x.data[idx]

    def bwd(g):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        x._accum(buf)

    return _node(data, (x,), bwd, "gather_rows")


# ---------------------------------------------------------------------------
# nonlinearities


def texp(x: Tensor) -> Tensor:
    data = np.exp(x.data)

    def bwd(g):
        x._accum(g * data)

    return _node(data, (x,), bwd, "exp")


def tlog(x: Tensor) -> Tensor:
    safe = np.maximum(x.data, LOG_EPS)
    data = np.log(safe)

    def bwd(g):
        x._accum(g / safe)

    return _node(data, (x,), bwd, "log")


def tsqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def bwd(g):
        x._accum(g * 0.5 / data)

    return _node(data, (x,), bwd, "sqrt")


def sigmoid(x: Tensor) -> Tensor:
    data = sp_special.expit(x.data)

    def bwd(g):
        x._accum(g * data * (1.0 - data))

    return _node(data, (x,), bwd, "sigmoid")


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)

    def bwd(g):
        x._accum(g * (x.data > 0))

    return _node(data, (x,), bwd, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    phi = 0.5 * (1.0 + sp_special.erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def bwd(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        x._accum(g * (phi + x.data * pdf))

    return _node(data, (x,), bwd, "gelu")


def dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout with a caller-supplied random stream.

    Rate 0 is the identity (the same tensor is returned). The mask is a pure
    function of the rng state, so a reseeded generator reproduces it.
    """
    if rate < 0 or rate >= 1:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout with rate > 0 needs an rng")
    mask = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    data = x.data * mask

    def bwd(g):
        x._accum(g * mask)

    return _node(data, (x,), bwd, "dropout")


# ---------------------------------------------------------------------------
# softmax family


def softmax_with_temperature(logits: Tensor, tau: float) -> Tensor:
    """Trailing-axis softmax of ``logits / tau``, max-shifted for stability."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = logits.data / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        logits._accum(data * (g - inner) / tau)

    return _node(data, (logits,), bwd, "softmax_t")


def log_softmax(logits: Tensor, tau: float = 1.0) -> Tensor:
    """Trailing-axis log-softmax of ``logits / tau`` (composed, stable)."""
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    z = scale(logits, 1.0 / tau)
    shift = z.data.max(axis=-1, keepdims=True)  # constant shift, gradient-free
    zs = add(z, Tensor(-shift))
    lse = tlog(tsum(texp(zs), axis=-1, keepdims=True))
    return sub(zs, lse)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis slice to zero mean and unit variance,
    then apply the elementwise affine transform."""
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = div(xc, tsqrt(add_scalar(var, eps)))
    return add(mul(inv, gain), bias)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine of the angle between two nonzero vectors, as a scalar tensor."""
    if u.ndim != 1 or v.ndim != 1 or u.shape != v.shape:
        raise DimensionError(f"cosine needs equal-length vectors, got {u.shape} and {v.shape}")
    if not np.linalg.norm(u.data) or not np.linalg.norm(v.data):
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    dot = tsum(mul(u, v))
    nu = tsqrt(tsum(mul(u, u)))
    nv = tsqrt(tsum(mul(v, v)))
    return div(dot, mul(nu, nv))


def multi_head_attention(
    x: Tensor,
    wq: Tensor, bq: Tensor,
    wk: Tensor, bk: Tensor,
    wv: Tensor, bv: Tensor,
    wo: Tensor, bo: Tensor,
    n_heads: int,
    additive_mask=None,
    dropout_rate: float = 0.0,
    rng=None,
) -> Tensor:
    """Multi-head scaled-dot-product self-attention over ``x`` [B, T, d].

    ``additive_mask`` is a constant array broadcastable to [B, heads, T, T],
    added to the attention scores before the softmax (0 to attend,
    large-negative to block). Dropout acts on the attention weights.
    """
    if x.ndim != 3:
        raise DimensionError(f"attention input must be [B, T, d], got {x.shape}")
    b, t, d = x.shape
    if d % n_heads:
        raise ParameterError(f"hidden dim {d} not divisible by {n_heads} heads")
    dk = d // n_heads

    def split_heads(m):
        return swapaxes(reshape(m, (b, t, n_heads, dk)), 1, 2)

    q = split_heads(add(matmul(x, wq), bq))
    k = split_heads(add(matmul(x, wk), bk))
    v = split_heads(add(matmul(x, wv), bv))
    scores = scale(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(dk))
    if additive_mask is not None:
        scores = add(scores, Tensor(additive_mask))
    attn = softmax_with_temperature(scores, 1.0)
    if dropout_rate > 0:
        attn = dropout(attn, dropout_rate, rng)
    ctx = reshape(swapaxes(matmul(attn, v), 1, 2), (b, t, d))
    return add(matmul(ctx, wo), bo)
