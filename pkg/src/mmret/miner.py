"""Threshold-filtered hard-negative mining with a frozen retriever."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mmret.corpus import GLOBAL, RetrievalPool, TaskInstance
from mmret.errors import ConfigError, ContractError

ABSOLUTE = "absolute"
RELATIVE = "relative_to_positive"

SCORE_DECIMALS = 6


@dataclass(frozen=True)
class MiningConfig:
    k: int = 8
    filter_mode: str = RELATIVE
    threshold: float = 0.0
    exclude_positives: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("mining k must be >= 1")
        if self.filter_mode == ABSOLUTE:
            if not -1.0 < self.threshold <= 1.0:
                raise ConfigError("absolute threshold must lie in (-1, 1]")
        elif self.filter_mode == RELATIVE:
            if self.threshold < 0:
                raise ConfigError("relative margin must be >= 0")
        else:
            raise ConfigError(f"unknown filter_mode {self.filter_mode!r}")
        if not self.exclude_positives:
            raise ConfigError("positives are always excluded from mining")


@dataclass
class MiningResult:
    query_id: int
    hard_negatives: list = field(default_factory=list)  # [(candidate_id, score)] best first
    filtered_out: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "hard_negatives": [[c, s] for c, s in self.hard_negatives],
            "filtered_out": [[c, s] for c, s in self.filtered_out],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MiningResult":
        return cls(
            int(d["query_id"]),
            [(int(c), float(s)) for c, s in d["hard_negatives"]],
            [(int(c), float(s)) for c, s in d["filtered_out"]],
        )


def ranking_order(ids, scores) -> np.ndarray:
    """Indices sorted by score descending, ties broken by ascending id."""
    ids = np.asarray(ids)
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((ids, -scores))


def select_hard_negatives(query_id, candidate_ids, scores, positive_ids, cfg: MiningConfig) -> MiningResult:
    """Apply the filter-then-top-k rule to one query's full score list.

    Absolute mode keeps negatives with ``score <= threshold``.  Relative mode
    keeps negatives with ``score < best_positive - margin``; at margin 0 this
    drops anything tied with or above the positive.
    """
    positives = set(int(p) for p in positive_ids)
    cids = np.asarray(candidate_ids, dtype=np.int64)
    sc = np.round(np.asarray(scores, dtype=np.float64), SCORE_DECIMALS)
    is_pos = np.isin(cids, list(positives))
    if cfg.filter_mode == ABSOLUTE:
        keep = sc <= cfg.threshold
    else:
        if not is_pos.any():
            raise ContractError(f"query {query_id}: no positive in the scored pool")
        keep = sc < sc[is_pos].max() - cfg.threshold
    result = MiningResult(int(query_id))
    for i in ranking_order(cids, sc):
        if is_pos[i]:
            continue
        item = (int(cids[i]), float(sc[i]))
        if keep[i]:
            if len(result.hard_negatives) < cfg.k:
                result.hard_negatives.append(item)
        else:
            result.filtered_out.append(item)
    return result


def score_pool(query_emb: np.ndarray, cand_emb: np.ndarray) -> np.ndarray:
    """Cosine scores in float64, clipped to [-1, 1]."""
    s = cand_emb.astype(np.float64) @ query_emb.astype(np.float64)
    return np.clip(s, -1.0, 1.0)


def mine(model, tasks: Sequence[TaskInstance], pool: RetrievalPool, cfg: MiningConfig,
         threads: int = 1, pool_embeddings=None) -> list:
    """Mine hard negatives for ``tasks`` against ``pool`` with a frozen retriever.

    ``model`` is anything with ``embed(sequences) -> (N, D)`` unit-norm rows.
    Results are ordered by query id.
    """
    if len(pool) == 0:
        raise ContractError("cannot mine against an empty pool")
    if pool.scope != GLOBAL:
        stray = [t.query_id for t in tasks if t.pool_id != pool.pool_id]
        if stray:
            raise ContractError(f"queries {stray[:5]} do not belong to pool {pool.pool_id}")
    tasks = sorted(tasks, key=lambda t: t.query_id)
    if not tasks:
        return []
    cand = model.embed(pool.sequences) if pool_embeddings is None else pool_embeddings
    queries = model.embed([t.query for t in tasks])
    ids = pool.ids

    def one(i):
        t = tasks[i]
        return select_hard_negatives(t.query_id, ids, score_pool(queries[i], cand), t.positive_ids, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, range(len(tasks))))
    return [one(i) for i in range(len(tasks))]


def mine_corpus(model, tasks: Sequence[TaskInstance], pools: Sequence[RetrievalPool], cfg: MiningConfig,
                threads: int = 1) -> list:
    """Mine every task against its own local pool; results sorted by query id."""
    by_pool: dict = {}
    for t in tasks:
        by_pool.setdefault(t.pool_id, []).append(t)
    out = []
    for pool in pools:
        if pool.pool_id in by_pool:
            out.extend(mine(model, by_pool[pool.pool_id], pool, cfg, threads))
    return sorted(out, key=lambda r: r.query_id)


@dataclass(frozen=True)
class RerankExample:
    query_id: int
    candidate_id: int
    label: str  # "yes" | "no"


def build_reranker_training_set(mining: Sequence[MiningResult], tasks: Sequence[TaskInstance],
                                n_negatives: int = 50) -> list:
    """One yes pair per query plus up to ``n_negatives`` no pairs from the top of its hard negatives."""
    if n_negatives < 0:
        raise ContractError("n_negatives must be >= 0")
    by_id = {t.query_id: t for t in tasks}
    out = []
    for res in sorted(mining, key=lambda r: r.query_id):
        task = by_id[res.query_id]
        out.append(RerankExample(res.query_id, int(min(task.positive_ids)), "yes"))
        for cid, _ in res.hard_negatives[:n_negatives]:
            out.append(RerankExample(res.query_id, cid, "no"))
    return out


def write_mining(results: Sequence[MiningResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in sorted(results, key=lambda r: r.query_id):
            fh.write(json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    return path


def read_mining(path) -> list:
    with open(path) as fh:
        return [MiningResult.from_dict(json.loads(line)) for line in fh if line.strip()]
