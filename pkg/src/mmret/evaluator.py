"""Recall@k / MAP@k evaluation over local and global candidate pools."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from mmret.corpus import GLOBAL, LOCAL, TASKS_BY_INDEX, TEST, RetrievalPool, TaskInstance, merge_pools
from mmret.errors import ContractError
from mmret.miner import ranking_order, score_pool
from mmret.reranker import RecallThenRerank

RECALL = "recall"
MAP = "map"


def _check(positives, k):
    if k < 1:
        raise ContractError("k must be >= 1")
    if not positives:
        raise ContractError("empty positive set")


def recall_at_k(ranked: Sequence[int], positives, k: int) -> float:
    """1.0 if any positive appears in the top ``k`` of ``ranked``, else 0.0."""
    positives = set(positives)
    _check(positives, k)
    return 1.0 if any(c in positives for c in list(ranked)[:k]) else 0.0


def map_at_k(ranked: Sequence[int], positives, k: int) -> float:
    """Average precision truncated at ``k``, normalised by ``min(|positives|, k)``."""
    positives = set(positives)
    _check(positives, k)
    hits, total = 0, 0.0
    for i, c in enumerate(list(ranked)[:k], start=1):
        if c in positives:
            hits += 1
            total += hits / i
    return total / min(len(positives), k)


def mean_metric(runs, k: int, metric: str = RECALL) -> float:
    """Mean of the per-query metric over ``(ranked, positives)`` pairs."""
    fn = recall_at_k if metric == RECALL else map_at_k
    vals = [fn(r, p, k) for r, p in runs]
    if not vals:
        raise ContractError("no queries to average")
    return float(np.mean(vals))


def default_k(task_type: int) -> int:
    return TASKS_BY_INDEX[task_type].recall_k


# ---------------------------------------------------------------- reports


@dataclass
class TaskMetric:
    scope: str
    task_type: int
    task_name: str
    dataset: str
    domain: str
    metric: str
    k: int
    value: float
    n_queries: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvalReport:
    metrics: list = field(default_factory=list)
    local_avg: Optional[float] = None
    global_avg: Optional[float] = None
    fingerprint: str = ""
    seed: int = 0

    def values(self, scope: str) -> list:
        return [m.value for m in self.metrics if m.scope == scope]

    def recompute_avg(self, scope: str) -> Optional[float]:
        vals = self.values(scope)
        return float(np.mean(vals)) if vals else None

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(self.metrics + other.metrics, self.local_avg, self.global_avg, self.fingerprint, self.seed)
        if other.local_avg is not None:
            out.local_avg = other.local_avg
        if other.global_avg is not None:
            out.global_avg = other.global_avg
        return out

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "local_avg": self.local_avg,
            "global_avg": self.global_avg,
            "metrics": [m.to_dict() for m in self.metrics],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls([TaskMetric(**m) for m in d["metrics"]], d["local_avg"], d["global_avg"], d["fingerprint"], d["seed"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scope", "task", "task_name", "dataset", "domain", "metric", "value"])
        for m in self.metrics:
            w.writerow([m.scope, m.task_type, m.task_name, m.dataset, m.domain,
                        f"{m.metric.upper()}@{m.k}", f"{100 * m.value:.6f}"])
        for scope, avg in ((LOCAL, self.local_avg), (GLOBAL, self.global_avg)):
            if avg is not None:
                w.writerow([scope, "avg", "Avg.", "", "", "", f"{100 * avg:.6f}"])
        return buf.getvalue()

    def write(self, directory, stem: str = "eval") -> list:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        js = d / f"{stem}.json"
        cs = d / f"{stem}.csv"
        js.write_text(self.to_json())
        cs.write_text(self.to_csv())
        return [js, cs]


# ---------------------------------------------------------------- evaluate


@dataclass
class QueryRanking:
    query_id: int
    task_type: int
    ranked_ids: list
    positives: tuple
    fused: Optional[object] = None  # FusedScoreSet when ranked by a pipeline


def rank_queries(model, tasks: Sequence[TaskInstance], pool: RetrievalPool, threads: int = 1,
                 pipeline: Optional[RecallThenRerank] = None, pool_embeddings=None) -> list:
    """Brute-force ranking of every query against ``pool`` (ties broken by id)."""
    retriever = pipeline.retriever if pipeline is not None else model
    cand = retriever.embed(pool.sequences) if pool_embeddings is None else pool_embeddings
    queries = retriever.embed([t.query for t in tasks]) if tasks else np.zeros((0, cand.shape[1]))
    ids = np.asarray(pool.ids)

    def one(i):
        t = tasks[i]
        s = score_pool(queries[i], cand)
        if pipeline is None:
            return QueryRanking(t.query_id, t.task_type, [int(ids[j]) for j in ranking_order(ids, s)],
                                tuple(t.positive_ids))
        res = pipeline.run_scores(t.query, pool, s, t.query_id)
        return QueryRanking(t.query_id, t.task_type, res.ranked_ids, tuple(t.positive_ids), res.fused)

    if threads > 1 and pipeline is None:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, range(len(tasks))))
    return [one(i) for i in range(len(tasks))]


def scoped_rankings(model, tasks, pools, scope: str, threads: int = 1, pipeline=None) -> list:
    tasks = sorted(tasks, key=lambda t: t.query_id)
    if scope == LOCAL:
        out = []
        by_id = {p.pool_id: p for p in pools}
        for pid in sorted({t.pool_id for t in tasks}):
            if pid not in by_id:
                raise ContractError(f"missing local pool {pid}")
            out.extend(rank_queries(model, [t for t in tasks if t.pool_id == pid], by_id[pid], threads, pipeline))
    elif scope == GLOBAL:
        glob = pools if isinstance(pools, RetrievalPool) else merge_pools(pools)
        if glob.scope != GLOBAL:
            raise ContractError("global scope requires the merged pool")
        out = rank_queries(model, tasks, glob, threads, pipeline)
    else:
        raise ContractError(f"unknown scope {scope!r}")
    return sorted(out, key=lambda r: r.query_id)


def report_from_rankings(rankings: Sequence[QueryRanking], scope: str, k_per_task: Optional[dict] = None,
                         metric: str = RECALL) -> EvalReport:
    k_per_task = k_per_task or {}
    metrics = []
    for tt in sorted({r.task_type for r in rankings}):
        task = TASKS_BY_INDEX[tt]
        k = int(k_per_task.get(tt, task.recall_k))
        runs = [(r.ranked_ids, r.positives) for r in rankings if r.task_type == tt]
        metrics.append(TaskMetric(scope, tt, task.name, task.dataset, task.domain, metric, k,
                                  mean_metric(runs, k, metric), len(runs)))
    rep = EvalReport(metrics)
    avg = rep.recompute_avg(scope)
    if scope == LOCAL:
        rep.local_avg = avg
    else:
        rep.global_avg = avg
    return rep


def evaluate(model, tasks: Sequence[TaskInstance], pools, scope: str = LOCAL, k_per_task: Optional[dict] = None,
             metric: str = RECALL, threads: int = 1, pipeline: Optional[RecallThenRerank] = None,
             split: Optional[str] = TEST, fingerprint: str = "", seed: int = 0, return_rankings: bool = False):
    """Score every query against its scoped pool and average per task.

    ``scope`` is ``local``, ``global`` or ``both``.  ``model`` is a retriever
    (anything with ``embed``); pass ``pipeline`` to rank with recall-then-rerank.
    With ``return_rankings`` the per-scope rankings come back alongside the report.
    """
    if split is not None:
        tasks = [t for t in tasks if t.split == split]
    scopes = (LOCAL, GLOBAL) if scope == "both" else (scope,)
    rep = EvalReport(fingerprint=fingerprint, seed=seed)
    rankings = {}
    for s in scopes:
        rankings[s] = scoped_rankings(model, tasks, pools, s, threads, pipeline)
        rep = rep.merge(report_from_rankings(rankings[s], s, k_per_task, metric))
    rep.fingerprint = fingerprint
    rep.seed = seed
    return (rep, rankings) if return_rankings else rep
