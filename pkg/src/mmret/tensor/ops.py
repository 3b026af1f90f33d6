"""Differentiable operations over :class:`TensorNode`.

Only scalar-with-tensor broadcasting is permitted.  Any other shape mixing
raises :class:`ShapeError`.  Row-wise helpers (``add_bias``, ``layer_norm``)
take a last-axis vector by contract rather than by broadcasting.
"""

from __future__ import annotations

import numpy as np

from mmret.errors import ContractError, DegenerateInputError, ShapeError
from mmret.tensor.core import TensorNode, as_node, make_node, storage_dtype

_F64 = np.float64
GELU_C = float(np.sqrt(2.0 / np.pi))


def _store(a):
    return np.asarray(a, order="C", dtype=storage_dtype())


def _f64(a):
    return np.asarray(a, dtype=_F64)


def _is_scalar(node):
    return node.data.ndim == 0


def _unbroadcast(g, shape):
    if shape == ():
        return np.asarray(g.sum())
    return g


def _check_pair(a, b, op):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} differ; only scalar broadcasting is allowed"
        )


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_node(a), as_node(b)
    _check_pair(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(_store(a.data + b.data), (a, b), bw, "add")


def sub(a, b):
    a, b = as_node(a), as_node(b)
    _check_pair(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(_store(a.data - b.data), (a, b), bw, "sub")


def mul(a, b):
    a, b = as_node(a), as_node(b)
    _check_pair(a, b, "mul")

    def bw(g):
        return (
            _unbroadcast(g * _f64(b.data), a.shape),
            _unbroadcast(g * _f64(a.data), b.shape),
        )

    return make_node(_store(a.data * b.data), (a, b), bw, "mul")


def neg(x):
    x = as_node(x)
    return make_node(_store(-x.data), (x,), lambda g: (-g,), "neg")


def scale(x, s):
    """Multiply by a Python float or a scalar-shaped node."""
    if isinstance(s, TensorNode):
        if s.size != 1:
            raise ShapeError(f"scale: factor must be scalar, got shape {s.shape}")
        return mul(x, s if _is_scalar(s) else reshape(s, ()))
    x = as_node(x)
    s = float(s)
    return make_node(_store(x.data * x.data.dtype.type(s)), (x,), lambda g: (g * s,), "scale")


def add_scalar(x, c: float):
    x = as_node(x)
    return make_node(_store(x.data + x.data.dtype.type(c)), (x,), lambda g: (g,), "add_scalar")


def exp(x):
    x = as_node(x)
    out = _store(np.exp(_f64(x.data)))
    return make_node(out, (x,), lambda g: (g * _f64(out),), "exp")


def log(x):
    x = as_node(x)
    xd = _f64(x.data)
    return make_node(_store(np.log(xd)), (x,), lambda g: (g / xd,), "log")


def _sigmoid64(z):
    z = _f64(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x):
    x = as_node(x)
    s = _sigmoid64(x.data)
    return make_node(_store(s), (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(x):
    """log(1 + e^x), evaluated without overflow or cancellation."""
    x = as_node(x)
    z = _f64(x.data)
    out = np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)
    s = _sigmoid64(z)
    return make_node(_store(out), (x,), lambda g: (g * s,), "softplus")


def tanh(x):
    x = as_node(x)
    t = np.tanh(_f64(x.data))
    return make_node(_store(t), (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_node(x)
    z = _f64(x.data)
    z2 = z * z
    t = np.tanh(GELU_C * z * (1.0 + 0.044715 * z2))
    out = 0.5 * z * (1.0 + t)

    def bw(g):
        du = GELU_C * (1.0 + 3 * 0.044715 * z2)
        return (g * (0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * du),)

    return make_node(_store(out), (x,), bw, "gelu")


def clip(x, lo: float, hi: float):
    """Clamp values; gradient passes only where the input lies inside [lo, hi]."""
    x = as_node(x)
    xd = _f64(x.data)
    inside = (xd >= lo) & (xd <= hi)
    return make_node(_store(np.clip(xd, lo, hi)), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for rank {ndim}")
    return tuple(a % ndim for a in axes)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    x = as_node(x)
    axes = _norm_axis(axis, x.data.ndim)
    out = _f64(x.data).sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_node(_store(out), (x,), bw, "sum")


def mean(x, axis=None, keepdims=False):
    x = as_node(x)
    axes = _norm_axis(axis, x.data.ndim)
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    if n == 0:
        raise DegenerateInputError("mean over an empty axis")
    out = _f64(x.data).sum(axis=axes, keepdims=keepdims) / n

    def bw(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return make_node(_store(out), (x,), bw, "mean")


def masked_mean(x, mask):
    """Average over the position axis (-2) of the positions where ``mask`` is true.

    ``x`` has shape ``(..., L, D)`` and ``mask`` has shape ``(..., L)``.
    """
    x = as_node(x)
    mask = np.asarray(mask, dtype=bool)
    if x.data.ndim < 2 or mask.shape != x.shape[:-1]:
        raise ShapeError(f"masked_mean: mask shape {mask.shape} does not match {x.shape[:-1]}")
    count = mask.sum(axis=-1)
    if np.any(count == 0):
        raise DegenerateInputError("masked_mean: no unmasked positions to average")
    w = mask.astype(_F64)[..., None]
    cnt = count.astype(_F64)[..., None]
    out = (_f64(x.data) * w).sum(axis=-2) / cnt

    def bw(g):
        return (np.expand_dims(g / cnt, -2) * w,)

    return make_node(_store(out), (x,), bw, "masked_mean")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product for rank-2 @ rank-2, rank-3 @ rank-3 (same batch) or
    rank-3 @ rank-2 (right operand shared across the batch)."""
    a, b = as_node(a), as_node(b)
    ra, rb = a.data.ndim, b.data.ndim
    ok = (
        (ra, rb) in ((2, 2), (3, 2))
        or ((ra, rb) == (3, 3) and a.shape[0] == b.shape[0])
    ) and a.shape[-1] == b.shape[-2]
    if not ok:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = _f64(a.data), _f64(b.data)
    out = np.matmul(A, B)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        if (ra, rb) == (3, 2):
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(A, -1, -2), g)
        return ga, gb

    return make_node(_store(out), (a, b), bw, "matmul")


def add_bias(x, b):
    """Add a last-axis vector ``b`` to every row of ``x``."""
    x, b = as_node(x), as_node(b)
    if b.data.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias shape {b.shape} does not match last dim of {x.shape}")

    def bw(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return make_node(_store(_f64(x.data) + _f64(b.data)), (x, b), bw, "add_bias")


def linear(x, w, b=None):
    y = matmul(x, w)
    return y if b is None else add_bias(y, b)


def transpose(x, axes=None):
    x = as_node(x)
    if axes is None:
        if x.data.ndim < 2:
            raise ShapeError("transpose: need rank >= 2")
        axes = tuple(range(x.data.ndim - 2)) + (x.data.ndim - 1, x.data.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation for rank {x.data.ndim}")
    inv = tuple(np.argsort(axes))
    out = np.asarray(np.transpose(x.data, axes), order="C")
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x, shape):
    x = as_node(x)
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = x.data.reshape(shape)
    return make_node(np.asarray(out, order="C"), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(nodes, axis=0):
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat: nothing to concatenate")
    nd = nodes[0].data.ndim
    ax = axis % nd
    for n in nodes[1:]:
        if n.data.ndim != nd or any(
            n.shape[i] != nodes[0].shape[i] for i in range(nd) if i != ax
        ):
            raise ShapeError(f"concat: shapes {nodes[0].shape} and {n.shape} differ off axis {ax}")
    sizes = [n.shape[ax] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.data for n in nodes], axis=ax)

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return make_node(_store(out), tuple(nodes), bw, "concat")


def take(x, indices):
    """Gather rows of ``x`` (axis 0).  Output shape is ``indices.shape + x.shape[1:]``."""
    x = as_node(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take: index out of range for leading dim {x.shape[0]}")

    def bw(g):
        acc = np.zeros(x.shape, dtype=_F64)
        np.add.at(acc, idx.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (acc,)

    return make_node(np.asarray(x.data[idx], order="C"), (x,), bw, "take")


embedding = take


# ---------------------------------------------------------------- normalisation


def softmax(x, axis=-1, mask=None):
    """Max-subtracted softmax.  Positions where ``mask`` is false get exactly 0."""
    x = as_node(x)
    ax = _norm_axis(axis, x.data.ndim)[0]
    z = _f64(x.data)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    m = z.max(axis=ax, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError("softmax: a slice is entirely masked")
    e = np.exp(z - m)
    s = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=ax, keepdims=True)),)

    return make_node(_store(s), (x,), bw, "softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    x, gain, bias = as_node(x), as_node(gain), as_node(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must equal last dim ({d},)"
        )
    z = _f64(x.data)
    mu = z.mean(axis=-1, keepdims=True)
    xc = z - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    G = _f64(gain.data)
    out = xhat * G + _f64(bias.data)

    def bw(g):
        gx_hat = g * G
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, d)
        return gx, (flat_g * xhat.reshape(-1, d)).sum(axis=0), flat_g.sum(axis=0)

    return make_node(_store(out), (x, gain, bias), bw, "layer_norm")


def l2_normalize(x, eps=1e-12):
    """Scale each last-axis row to unit Euclidean norm."""
    x = as_node(x)
    z = _f64(x.data)
    n = np.sqrt((z * z).sum(axis=-1, keepdims=True) + eps)
    y = z / n

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return make_node(_store(y), (x,), bw, "l2_normalize")


# ---------------------------------------------------------------- fused losses


def _masked_logits(logits, mask):
    z = _f64(logits.data)
    if logits.data.ndim != 2:
        raise ShapeError(f"expected (rows, classes) logits, got {logits.shape}")
    if mask is None:
        return z, np.ones(z.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != z.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match logits {z.shape}")
    return np.where(mask, z, -np.inf), mask


def _logsumexp_rows(z):
    """Row log-sum-exp, split as ``m + log1p(rest)`` so near-zero losses keep precision."""
    rows = np.arange(z.shape[0])
    jmax = np.argmax(z, axis=1)
    m = z[rows, jmax]
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError("a row has no unmasked entries")
    e = np.exp(z - m[:, None])
    e[rows, jmax] = 0.0
    return m, np.log1p(e.sum(axis=1))


def softmax_cross_entropy(logits, targets, mask=None):
    """Per-row ``-log softmax(logits)[target]`` over unmasked entries."""
    logits = as_node(logits)
    z, mask = _masked_logits(logits, mask)
    t = np.asarray(targets, dtype=np.int64)
    rows = np.arange(z.shape[0])
    if t.shape != (z.shape[0],) or t.min(initial=0) < 0 or t.max(initial=0) >= z.shape[1]:
        raise ContractError("softmax_cross_entropy: target index out of bounds")
    if not np.all(mask[rows, t]):
        raise ContractError("softmax_cross_entropy: target entry is masked out")
    m, rest = _logsumexp_rows(z)
    loss = (m - z[rows, t]) + rest

    def bw(g):
        p = np.exp(z - (m + rest)[:, None])
        p[rows, t] -= 1.0
        return (g[:, None] * p,)

    return make_node(_store(loss), (logits,), bw, "softmax_cross_entropy")


def kl_to_target(logits, target_probs, mask=None):
    """Per-row ``KL(P || softmax(logits))`` with ``P`` a constant distribution."""
    logits = as_node(logits)
    z, mask = _masked_logits(logits, mask)
    P = np.where(mask, _f64(target_probs), 0.0)
    m, rest = _logsumexp_rows(z)
    logq = z - (m + rest)[:, None]
    pos = P > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, P * (np.log(np.where(pos, P, 1.0)) - np.where(pos, logq, 0.0)), 0.0)
    loss = terms.sum(axis=1)

    def bw(g):
        q = np.where(mask, np.exp(logq), 0.0)
        return (g[:, None] * (q - P),)

    return make_node(_store(loss), (logits,), bw, "kl_to_target")
