"""Small pre-LN transformer embedder with the embedding-extraction variants.

Attention is causal or bidirectional.  Pooling reads the last position, the
mean of all positions, or the mean of the positions outside the instruction
span.  An optional compression suffix (five reserved cue ids plus an
``<emb>`` id) is appended before the forward pass.

Sequences are grouped by length and each group runs as one rank-3 batch, so
a sequence's embedding never depends on what else is in the batch.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from mmret.corpus import EMB_TOKEN, SUFFIX_TOKENS, VOCAB_SIZE, TokenSequence
from mmret.errors import ConfigError, DegenerateInputError, LengthError
from mmret.tensor import Parameter, TensorNode, as_node, ops

CAUSAL = "causal"
BIDIRECTIONAL = "bidirectional"
LAST_TOKEN = "last_token"
MEAN = "mean"
MASKED_MEAN = "masked_mean"

EVAL_CHUNK = 512


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    max_len: int = 80
    attention_mode: str = BIDIRECTIONAL
    pooling_mode: str = MEAN
    compression_suffix: bool = False
    positional_encoding: bool = True
    final_token_readout: bool = False
    d_ff: Optional[int] = None
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.attention_mode not in (CAUSAL, BIDIRECTIONAL):
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.pooling_mode not in (LAST_TOKEN, MEAN, MASKED_MEAN):
            raise ConfigError(f"unknown pooling_mode {self.pooling_mode!r}")
        if self.pooling_mode == LAST_TOKEN and not (self.compression_suffix or self.final_token_readout):
            raise ConfigError("last_token pooling needs compression_suffix or final_token_readout")
        if self.n_layers < 1 or self.max_len < 1:
            raise ConfigError("n_layers and max_len must be positive")

    @property
    def ff_dim(self) -> int:
        return self.d_ff or 4 * self.d_model

    def replace(self, **changes) -> "EncoderConfig":
        d = asdict(self)
        d.update(changes)
        return EncoderConfig(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def readout_configs(base: Optional[EncoderConfig] = None) -> dict:
    """The five embedding-extraction cells, keyed ``ID-0`` .. ``ID-4``."""
    base = base or EncoderConfig()
    return {
        "ID-0": base.replace(attention_mode=CAUSAL, pooling_mode=LAST_TOKEN, compression_suffix=True),
        "ID-1": base.replace(attention_mode=BIDIRECTIONAL, pooling_mode=LAST_TOKEN, compression_suffix=True),
        "ID-2": base.replace(attention_mode=CAUSAL, pooling_mode=MEAN, compression_suffix=True),
        "ID-3": base.replace(attention_mode=BIDIRECTIONAL, pooling_mode=MEAN, compression_suffix=True),
        "ID-4": base.replace(attention_mode=BIDIRECTIONAL, pooling_mode=MEAN, compression_suffix=False),
    }


def init_params(cfg: EncoderConfig, seed: int) -> dict:
    rng = np.random.default_rng([int(seed), 17])
    d, f = cfg.d_model, cfg.ff_dim

    def normal(*shape, std=0.02):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    out_std = 0.02 / np.sqrt(2 * cfg.n_layers)
    params = {"tok_emb": normal(cfg.vocab_size, d)}
    if cfg.positional_encoding:
        params["pos_emb"] = normal(cfg.max_len, d)
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        params[p + "ln1.g"] = np.ones(d, np.float32)
        params[p + "ln1.b"] = np.zeros(d, np.float32)
        for name in ("wq", "wk", "wv"):
            params[p + f"attn.{name}"] = normal(d, d, std=1.0 / np.sqrt(d))
            params[p + f"attn.b{name[1]}"] = np.zeros(d, np.float32)
        params[p + "attn.wo"] = normal(d, d, std=out_std)
        params[p + "attn.bo"] = np.zeros(d, np.float32)
        params[p + "ln2.g"] = np.ones(d, np.float32)
        params[p + "ln2.b"] = np.zeros(d, np.float32)
        params[p + "mlp.w1"] = normal(d, f, std=1.0 / np.sqrt(d))
        params[p + "mlp.b1"] = np.zeros(f, np.float32)
        params[p + "mlp.w2"] = normal(f, d, std=out_std)
        params[p + "mlp.b2"] = np.zeros(d, np.float32)
    params["ln_f.g"] = np.ones(d, np.float32)
    params["ln_f.b"] = np.zeros(d, np.float32)
    return {name: Parameter(name, arr) for name, arr in params.items()}


def constant_nodes(params: dict) -> dict:
    return {name: as_node(p) for name, p in params.items()}


# ---------------------------------------------------------------- forward


def prepare(cfg: EncoderConfig, seq: TokenSequence):
    """Token ids after the optional suffix, plus the pooling mask."""
    tokens = list(seq.tokens)
    if cfg.compression_suffix:
        tokens += list(SUFFIX_TOKENS) + [EMB_TOKEN]
    if not tokens:
        raise DegenerateInputError("empty sequence")
    if len(tokens) > cfg.max_len:
        raise LengthError(f"sequence of {len(tokens)} tokens exceeds max_len={cfg.max_len}")
    mask = np.ones(len(tokens), dtype=bool)
    if cfg.pooling_mode == MASKED_MEAN and seq.instruction_span is not None:
        lo, hi = seq.instruction_span
        mask[lo:hi] = False
        if not mask.any():
            raise DegenerateInputError("instruction span covers every token; nothing left to pool")
    return np.asarray(tokens, dtype=np.int64), mask


def _attention(cfg, P, prefix, x, causal_mask):
    B, L, D = x.shape
    H = cfg.n_heads
    dh = D // H

    def heads(t):
        t = ops.reshape(t, (B, L, H, dh))
        return ops.reshape(ops.transpose(t, (0, 2, 1, 3)), (B * H, L, dh))

    q = heads(ops.linear(x, P[prefix + "wq"], P[prefix + "bq"]))
    k = heads(ops.linear(x, P[prefix + "wk"], P[prefix + "bk"]))
    v = heads(ops.linear(x, P[prefix + "wv"], P[prefix + "bv"]))
    scores = ops.scale(ops.matmul(q, ops.transpose(k)), 1.0 / np.sqrt(dh))
    attn = ops.softmax(scores, axis=-1, mask=causal_mask)
    out = ops.matmul(attn, v)
    out = ops.reshape(ops.transpose(ops.reshape(out, (B, H, L, dh)), (0, 2, 1, 3)), (B, L, D))
    return ops.linear(out, P[prefix + "wo"], P[prefix + "bo"])


def attention_mask(cfg: EncoderConfig, length: int):
    if cfg.attention_mode == CAUSAL:
        return np.tril(np.ones((length, length), dtype=bool))
    return None


def hidden_states(cfg: EncoderConfig, P: dict, ids: np.ndarray) -> TensorNode:
    """Final-layer states for a ``(B, L)`` block of equal-length sequences."""
    B, L = ids.shape
    x = ops.take(P["tok_emb"], ids)
    if cfg.positional_encoding:
        x = ops.add(x, ops.take(P["pos_emb"], np.broadcast_to(np.arange(L), (B, L))))
    mask = attention_mask(cfg, L)
    eps = cfg.ln_eps
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = ops.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"], eps)
        x = ops.add(x, _attention(cfg, P, p + "attn.", h, mask))
        h = ops.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"], eps)
        h = ops.gelu(ops.linear(h, P[p + "mlp.w1"], P[p + "mlp.b1"]))
        x = ops.add(x, ops.linear(h, P[p + "mlp.w2"], P[p + "mlp.b2"]))
    return ops.layer_norm(x, P["ln_f.g"], P["ln_f.b"], eps)


def _pool_block(hidden: TensorNode, mode: str, masks: np.ndarray) -> TensorNode:
    B, L, D = hidden.shape
    if mode == LAST_TOKEN:
        return ops.take(ops.reshape(hidden, (B * L, D)), np.arange(B) * L + (L - 1))
    if mode == MEAN:
        return ops.mean(hidden, axis=-2)
    return ops.masked_mean(hidden, masks)


def pool(hidden, mode: str, instruction_span=None) -> np.ndarray:
    """Pool one sequence's ``(L, D)`` states to a raw (unnormalised) vector."""
    h = as_node(hidden)
    if h.data.ndim != 2 or h.shape[0] == 0:
        raise DegenerateInputError("pool needs a non-empty (L, D) array")
    mask = np.ones(h.shape[0], dtype=bool)
    if mode == MASKED_MEAN and instruction_span is not None:
        mask[instruction_span[0] : instruction_span[1]] = False
    out = _pool_block(ops.reshape(h, (1,) + h.shape), mode, mask[None])
    return out.data[0]


def _buckets(prepared) -> list:
    groups: dict = {}
    for i, (ids, _) in enumerate(prepared):
        groups.setdefault(len(ids), []).append(i)
    return [groups[k] for k in sorted(groups)]


def _prepare_all(cfg, inputs):
    prepared = []
    for i, seq in enumerate(inputs):
        try:
            prepared.append(prepare(cfg, seq))
        except (LengthError, DegenerateInputError) as e:
            raise type(e)(f"item {i}: {e}") from e
    return prepared


def _embed_block(cfg, P, prepared, idx, readout=True):
    ids = np.stack([prepared[i][0] for i in idx])
    masks = np.stack([prepared[i][1] for i in idx])
    pooled = _pool_block(hidden_states(cfg, P, ids), cfg.pooling_mode, masks)
    return ops.l2_normalize(pooled) if readout else pooled


def encode_batch(cfg: EncoderConfig, params: dict, inputs: Sequence[TokenSequence], threads: int = 1,
                 normalize: bool = True) -> np.ndarray:
    """Embed many sequences without tracking; row ``i`` is the embedding of ``inputs[i]``."""
    prepared = _prepare_all(cfg, inputs)
    P = constant_nodes(params)
    jobs = []
    for bucket in _buckets(prepared):
        for s in range(0, len(bucket), EVAL_CHUNK):
            jobs.append(bucket[s : s + EVAL_CHUNK])
    out = np.zeros((len(inputs), cfg.d_model), dtype=np.float32)

    def run(idx):
        return idx, _embed_block(cfg, P, prepared, idx, normalize).data

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool_:
            results = list(pool_.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for idx, emb in results:
        out[idx] = emb
    return out


def encode(cfg: EncoderConfig, params: dict, seq: TokenSequence) -> np.ndarray:
    return encode_batch(cfg, params, [seq])[0]


def encode_tracked(cfg: EncoderConfig, P: dict, inputs: Sequence[TokenSequence], normalize: bool = True) -> TensorNode:
    """Tape-recorded embeddings ``(N, D)`` in input order."""
    prepared = _prepare_all(cfg, inputs)
    order, blocks = [], []
    for bucket in _buckets(prepared):
        blocks.append(_embed_block(cfg, P, prepared, bucket, normalize))
        order.extend(bucket)
    stacked = blocks[0] if len(blocks) == 1 else ops.concat(blocks, axis=0)
    if order == list(range(len(order))):
        return stacked
    return ops.take(stacked, np.argsort(np.asarray(order)))


@dataclass
class Retriever:
    """Frozen bi-encoder: config plus parameters."""

    cfg: EncoderConfig
    params: dict
    threads: int = 1

    def embed(self, seqs: Sequence[TokenSequence]) -> np.ndarray:
        return encode_batch(self.cfg, self.params, seqs, self.threads)

