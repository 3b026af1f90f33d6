"""Pointwise cross-encoder reranker and the recall-then-rerank pipeline."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mmret.corpus import SEP_TOKEN, TEXT, RetrievalPool, TokenSequence
from mmret.encoder import (
    BIDIRECTIONAL,
    MASKED_MEAN,
    EncoderConfig,
    Retriever,
    _buckets,
    _prepare_all,
    constant_nodes,
    hidden_states,
    _pool_block,
    init_params,
)
from mmret.errors import LengthError
from mmret.miner import ranking_order, score_pool
from mmret.objectives import FusedScoreSet, fuse_scores
from mmret.tensor import Parameter, TensorNode, ops

EVAL_CHUNK = 256


def reranker_config(base: EncoderConfig) -> EncoderConfig:
    return base.replace(attention_mode=BIDIRECTIONAL, pooling_mode=MASKED_MEAN, compression_suffix=False)


def init_reranker_params(cfg: EncoderConfig, seed: int, encoder_params: Optional[dict] = None) -> dict:
    """Encoder weights (fresh or copied from a retriever) plus a zero d_model -> 1 head."""
    if encoder_params is None:
        params = init_params(cfg, seed)
    else:
        params = {n: Parameter(n, p.data.copy(), p.trainable) for n, p in encoder_params.items()}
    params["head.w"] = Parameter("head.w", np.zeros((cfg.d_model, 1), np.float32))
    params["head.b"] = Parameter("head.b", np.zeros(1, np.float32))
    return params


@dataclass
class RerankerModel:
    cfg: EncoderConfig
    params: dict
    threads: int = 1

    def score(self, query: TokenSequence, candidates: Sequence[TokenSequence]) -> np.ndarray:
        return yes_probabilities(self, [join(query, c, self.cfg.max_len) for c in candidates])


def join(query: TokenSequence, candidate: TokenSequence, max_len: Optional[int] = None) -> TokenSequence:
    """Query tokens, the separator, then candidate tokens; keeps the query's instruction span."""
    n = len(query) + 1 + len(candidate)
    if max_len is not None and n > max_len:
        raise LengthError(f"joined pair of {n} tokens exceeds max_len={max_len}")
    return TokenSequence(
        query.tokens + (SEP_TOKEN,) + candidate.tokens,
        query.modality_tags + (TEXT,) + candidate.modality_tags,
        query.instruction_span,
        query.concept_id,
    )


def _logit_block(cfg, P, prepared, idx) -> TensorNode:
    ids = np.stack([prepared[i][0] for i in idx])
    masks = np.stack([prepared[i][1] for i in idx])
    pooled = _pool_block(hidden_states(cfg, P, ids), cfg.pooling_mode, masks)
    return ops.reshape(ops.linear(pooled, P["head.w"], P["head.b"]), (len(idx),))


def reranker_logits_tracked(cfg: EncoderConfig, P: dict, joined: Sequence[TokenSequence]) -> TensorNode:
    prepared = _prepare_all(cfg, joined)
    order, blocks = [], []
    for bucket in _buckets(prepared):
        blocks.append(_logit_block(cfg, P, prepared, bucket))
        order.extend(bucket)
    out = blocks[0] if len(blocks) == 1 else ops.concat(blocks, axis=0)
    if order != list(range(len(order))):
        out = ops.take(out, np.argsort(np.asarray(order)))
    return out


def reranker_logits(model: RerankerModel, joined: Sequence[TokenSequence]) -> np.ndarray:
    prepared = _prepare_all(model.cfg, joined)
    P = constant_nodes(model.params)
    jobs = []
    for bucket in _buckets(prepared):
        for s in range(0, len(bucket), EVAL_CHUNK):
            jobs.append(bucket[s : s + EVAL_CHUNK])
    out = np.zeros(len(joined), dtype=np.float32)

    def run(idx):
        return idx, _logit_block(model.cfg, P, prepared, idx).data

    if model.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=model.threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for idx, vals in results:
        out[idx] = vals
    return out


def yes_probabilities(model: RerankerModel, joined: Sequence[TokenSequence]) -> np.ndarray:
    if not joined:
        return np.zeros(0)
    return ops.sigmoid(reranker_logits(model, joined)).data.astype(np.float64)


@dataclass
class RerankRequest:
    query: TokenSequence
    candidates: list  # [(candidate_id, TokenSequence)] in retriever order
    top_m: int


def rerank(model: RerankerModel, req: RerankRequest) -> list:
    """Score each pair independently; sort by YES-probability, ties by candidate id."""
    cands = req.candidates[: req.top_m]
    probs = model.score(req.query, [s for _, s in cands])
    ids = [c for c, _ in cands]
    return [(ids[i], float(probs[i])) for i in ranking_order(ids, probs)]


@dataclass
class CostCounter:
    similarity_computations: int = 0
    reranker_forwards: int = 0


@dataclass
class RankedResult:
    query_id: int
    ranked_ids: list
    fused: FusedScoreSet


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)


@dataclass
class RecallThenRerank:
    """Retriever shortlist of ``top_m`` followed by fused reranking."""

    retriever: Retriever
    reranker: RerankerModel
    alpha: float = 0.5
    top_m: int = 100
    normalize_recall: bool = False
    counter: CostCounter = field(default_factory=CostCounter)

    def run(self, query: TokenSequence, pool: RetrievalPool, query_id: int = -1,
            pool_embeddings: Optional[np.ndarray] = None, query_embedding: Optional[np.ndarray] = None) -> RankedResult:
        cand = self.retriever.embed(pool.sequences) if pool_embeddings is None else pool_embeddings
        q = self.retriever.embed([query])[0] if query_embedding is None else query_embedding
        return self.run_scores(query, pool, score_pool(q, cand), query_id)

    def run_scores(self, query: TokenSequence, pool: RetrievalPool, recall_scores: np.ndarray,
                   query_id: int = -1) -> RankedResult:
        ids = np.asarray(pool.ids)
        self.counter.similarity_computations += len(ids)
        order = ranking_order(ids, recall_scores)
        m = min(self.top_m, len(ids))
        head, tail = order[:m], order[m:]
        head_ids = [int(ids[i]) for i in head]
        s_recall = recall_scores[head].astype(np.float64)
        s_rerank = self.reranker.score(query, [pool.candidates[i][1] for i in head])
        self.counter.reranker_forwards += m
        fused_in = minmax_normalize(s_recall) if self.normalize_recall else s_recall
        fused = fuse_scores(fused_in, s_rerank, self.alpha, query_id, head_ids)
        ranked = [head_ids[i] for i in ranking_order(head_ids, fused.s_multi)]
        ranked += [int(ids[i]) for i in tail]
        return RankedResult(query_id, ranked, fused)


def recall_then_rerank(retriever, reranker, alpha, query, pool, top_m, normalize_recall=False,
                       counter: Optional[CostCounter] = None, query_id: int = -1) -> RankedResult:
    pipe = RecallThenRerank(retriever, reranker, alpha, top_m, normalize_recall, counter or CostCounter())
    return pipe.run(query, pool, query_id)


def write_ranked_report(results: Sequence[RankedResult], path) -> Path:
    """One line per query: ids and the three score lists at 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(vals):
        return [f"{v:.6f}" for v in vals]

    with open(path, "w") as fh:
        for r in sorted(results, key=lambda r: r.query_id):
            f = r.fused
            rec = {
                "query_id": r.query_id,
                "candidate_ids": f.candidate_ids,
                "s_recall": fmt(f.s_recall),
                "s_rerank": fmt(f.s_rerank),
                "s_multi": fmt(f.s_multi),
                "alpha": f"{f.alpha:.6f}",
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    return path
