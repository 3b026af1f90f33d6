"""Randomised gradient-check cases, one generator per differentiable op.

Each generator takes an rng and returns ``(fn, arrays)`` where ``fn`` maps
leaf nodes to a scalar node.  Inputs stay in [-2, 2] except where an op's
domain needs otherwise (log, clip away from its kinks, layer_norm rows with a
spread well above the difference step).
"""

import numpy as np

from mmret.tensor import ops
from mmret.tensor.gradcheck import projected


def _u(rng, *shape, lo=-2.0, hi=2.0):
    return rng.uniform(lo, hi, size=shape)


def _shape(rng, max_rank=3, max_dim=4):
    return tuple(int(d) for d in rng.integers(1, max_dim + 1, size=int(rng.integers(1, max_rank + 1))))


def _elementwise(op, lo=-2.0, hi=2.0):
    def gen(rng):
        x = _u(rng, *_shape(rng), lo=lo, hi=hi)
        return projected(op, _u(rng, *x.shape)), [x]

    return gen


def _binary(op):
    def gen(rng):
        shape = _shape(rng)
        a, b = _u(rng, *shape), _u(rng, *shape)
        if rng.random() < 0.25:
            b = _u(rng)
        return projected(op, _u(rng, *shape)), [a, b]

    return gen


def _clip(rng):
    x = _u(rng, *_shape(rng))
    # keep every entry at least 0.05 away from the kinks at +-1
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x + 0.1, x)
    return projected(lambda t: ops.clip(t, -1.0, 1.0), _u(rng, *x.shape)), [x]


def _scale(rng):
    s = float(rng.uniform(-2, 2))
    return _elementwise(lambda t: ops.scale(t, s))(rng)


def _add_scalar(rng):
    c = float(rng.uniform(-2, 2))
    return _elementwise(lambda t: ops.add_scalar(t, c))(rng)


def _reduce(op):
    def gen(rng):
        shape = _shape(rng)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, len(shape)))
        keep = bool(rng.random() < 0.5)
        x = _u(rng, *shape)
        out_shape = op(np.zeros(shape), axis=axis, keepdims=keep).shape
        w = _u(rng, *out_shape)
        return (lambda t: ops.sum(ops.mul(getattr(ops, op.__name__)(t, axis=axis, keepdims=keep), w))), [x]

    return gen


def _masked_mean(rng):
    b, l, d = (int(v) for v in rng.integers(1, 5, size=3))
    mask = rng.random((b, l)) < 0.6
    mask[:, 0] = True
    x = _u(rng, b, l, d)
    return projected(lambda t: ops.masked_mean(t, mask), _u(rng, b, d)), [x]


def _matmul(rng):
    kind = int(rng.integers(0, 3))
    m, k, n, bsz = (int(v) for v in rng.integers(1, 5, size=4))
    if kind == 0:
        a, b, out = _u(rng, m, k), _u(rng, k, n), (m, n)
    elif kind == 1:
        a, b, out = _u(rng, bsz, m, k), _u(rng, bsz, k, n), (bsz, m, n)
    else:
        a, b, out = _u(rng, bsz, m, k), _u(rng, k, n), (bsz, m, n)
    return projected(ops.matmul, _u(rng, *out)), [a, b]


def _add_bias(rng):
    shape = _shape(rng, max_rank=3)
    x, bias = _u(rng, *shape), _u(rng, shape[-1])
    return projected(ops.add_bias, _u(rng, *shape)), [x, bias]


def _linear(rng):
    lead = _shape(rng, max_rank=2)
    d, f = (int(v) for v in rng.integers(1, 5, size=2))
    x, w, b = _u(rng, *lead, d), _u(rng, d, f), _u(rng, f)
    return projected(ops.linear, _u(rng, *lead, f)), [x, w, b]


def _transpose(rng):
    shape = _shape(rng, max_rank=4)
    axes = tuple(int(a) for a in rng.permutation(len(shape)))
    out = tuple(shape[a] for a in axes)
    return projected(lambda t: ops.transpose(t, axes), _u(rng, *out)), [_u(rng, *shape)]


def _reshape(rng):
    shape = _shape(rng)
    n = int(np.prod(shape))
    new = (n,) if rng.random() < 0.5 else (1, n)
    return projected(lambda t: ops.reshape(t, new), _u(rng, *new)), [_u(rng, *shape)]


def _concat(rng):
    shape = list(_shape(rng))
    ax = int(rng.integers(0, len(shape)))
    parts = []
    for _ in range(int(rng.integers(1, 4))):
        s = list(shape)
        s[ax] = int(rng.integers(1, 4))
        parts.append(_u(rng, *s))
    out = np.concatenate(parts, axis=ax).shape
    w = _u(rng, *out)
    return (lambda *t: ops.sum(ops.mul(ops.concat(list(t), axis=ax), w))), parts


def _take(rng):
    n, d = (int(v) for v in rng.integers(1, 5, size=2))
    idx = rng.integers(0, n, size=_shape(rng, max_rank=2))  # repeats exercise accumulation
    w = _u(rng, *idx.shape, d)
    return projected(lambda t: ops.take(t, idx), w), [_u(rng, n, d)]


def _softmax(rng):
    shape = _shape(rng)
    axis = int(rng.integers(0, len(shape)))
    mask = None
    if rng.random() < 0.4:
        mask = rng.random(shape) < 0.7
        mask = np.where(np.any(mask, axis=axis, keepdims=True), mask, True)
    return projected(lambda t: ops.softmax(t, axis=axis, mask=mask), _u(rng, *shape)), [_u(rng, *shape)]


def _layer_norm(rng):
    lead = _shape(rng, max_rank=2)
    d = int(rng.integers(2, 6))
    x, g, b = _u(rng, *lead, d), _u(rng, d), _u(rng, d)
    # central differences at step 1e-3 need rows whose spread dwarfs the step
    while x.std(axis=-1).min() < 0.1:
        x = _u(rng, *lead, d)
    return projected(lambda t, gg, bb: ops.layer_norm(t, gg, bb), _u(rng, *lead, d)), [x, g, b]


def _l2_normalize(rng):
    lead = _shape(rng, max_rank=2)
    d = int(rng.integers(2, 6))  # d=1 has an identically zero gradient
    x = _u(rng, *lead, d)
    x = np.where(np.linalg.norm(x, axis=-1, keepdims=True) < 0.2, x + 0.5, x)
    return projected(ops.l2_normalize, _u(rng, *lead, d)), [x]


def _row_mask(rng, r, c, targets=None):
    mask = rng.random((r, c)) < 0.7
    mask[np.arange(r), targets if targets is not None else 0] = True
    return mask


def _cross_entropy(rng):
    r, c = (int(v) for v in rng.integers(1, 6, size=2))
    t = rng.integers(0, c, size=r)
    mask = _row_mask(rng, r, c, t) if rng.random() < 0.4 else None
    w = _u(rng, r)
    return (lambda z: ops.sum(ops.mul(ops.softmax_cross_entropy(z, t, mask), w))), [_u(rng, r, c)]


def _kl(rng):
    r, c = (int(v) for v in rng.integers(1, 6, size=2))
    mask = _row_mask(rng, r, c) if rng.random() < 0.4 else np.ones((r, c), bool)
    p = np.where(mask, rng.random((r, c)), 0.0)
    p /= p.sum(axis=1, keepdims=True)
    w = _u(rng, r)
    return (lambda z: ops.sum(ops.mul(ops.kl_to_target(z, p, mask), w))), [_u(rng, r, c)]


CASES = {
    "add": _binary(ops.add),
    "sub": _binary(ops.sub),
    "mul": _binary(ops.mul),
    "neg": _elementwise(ops.neg),
    "scale": _scale,
    "add_scalar": _add_scalar,
    "exp": _elementwise(ops.exp),
    "log": _elementwise(ops.log, lo=0.2, hi=2.0),
    "sigmoid": _elementwise(ops.sigmoid),
    "softplus": _elementwise(ops.softplus),
    "tanh": _elementwise(ops.tanh),
    "gelu": _elementwise(ops.gelu),
    "clip": _clip,
    "sum": _reduce(np.sum),
    "mean": _reduce(np.mean),
    "masked_mean": _masked_mean,
    "matmul": _matmul,
    "add_bias": _add_bias,
    "linear": _linear,
    "transpose": _transpose,
    "reshape": _reshape,
    "concat": _concat,
    "take": _take,
    "softmax": _softmax,
    "layer_norm": _layer_norm,
    "l2_normalize": _l2_normalize,
    "softmax_cross_entropy": _cross_entropy,
    "kl_to_target": _kl,
}


def encoder_case(rng):
    """A tiny encoder forward over random tokens; leaves are every parameter."""
    from mmret.encoder import BIDIRECTIONAL, CAUSAL, LAST_TOKEN, MASKED_MEAN, MEAN, EncoderConfig, _pool_block, \
        hidden_states, init_params

    mode = [MEAN, MASKED_MEAN, LAST_TOKEN][int(rng.integers(0, 3))]
    cfg = EncoderConfig(d_model=4, n_layers=1, n_heads=2, vocab_size=6, max_len=4, d_ff=4,
                        attention_mode=[CAUSAL, BIDIRECTIONAL][int(rng.integers(0, 2))], pooling_mode=mode,
                        final_token_readout=mode == LAST_TOKEN)
    params = init_params(cfg, int(rng.integers(0, 2**31)))
    names = sorted(params)
    # unit-scale embeddings keep layer-norm inputs well spread relative to the difference step
    arrays = [params[n].data.astype(np.float64) + rng.normal(0, 1.0 if n.endswith("_emb") else 0.3, params[n].shape)
              for n in names]
    b, length = int(rng.integers(1, 3)), int(rng.integers(1, 5))
    ids = rng.integers(0, cfg.vocab_size, size=(b, length))
    masks = np.ones((b, length), bool)
    if length > 1:
        masks[:, 0] = False
    w = _u(rng, b, cfg.d_model)

    def fn(*leaves):
        P = dict(zip(names, leaves))
        return ops.sum(ops.mul(ops.l2_normalize(_pool_block(hidden_states(cfg, P, ids), mode, masks)), w))

    return fn, arrays
