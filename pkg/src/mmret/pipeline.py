"""End-to-end orchestration over an output directory.

Layout under the run directory::

    config.yaml              resolved config (minus output_dir / threads)
    data/corpus/             tasks, candidates, concepts (JSONL)
    data/text_pairs.jsonl    text-only pretraining pairs
    data/text_image_pairs.jsonl
    checkpoints/<stage>.ckpt
    logs/<stage>.jsonl       per-step training log (has wall time; not hashed)
    mining/<stage>.jsonl     hard negatives mined with that stage's retriever
    teacher/fused_scores.jsonl
    reports/                 eval JSON/CSV, ranked pipeline output, summary
    figures/                 PNG figures
    manifest.json            config fingerprint, seed, artifact hashes
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from mmret import plotting
from mmret.config import RunConfig
from mmret.corpus import (
    TRAIN,
    Corpus,
    build_text_image_pairs,
    build_text_pretrain_pairs,
    generate_corpus,
    read_corpus,
    read_pairs,
    write_corpus,
    write_pairs,
)
from mmret.errors import ContractError
from mmret.evaluator import EvalReport, evaluate
from mmret.miner import build_reranker_training_set, mine_corpus, read_mining, score_pool, write_mining
from mmret.objectives import FusedScoreSet, fuse_scores
from mmret.reranker import RankedResult, RecallThenRerank, minmax_normalize, write_ranked_report
from mmret.trainer import (
    CROSS_MODAL,
    DISTILL,
    HARD_NEG,
    INSTRUCTION_TUNE,
    RERANK_TRAIN,
    TEXT_ADAPT,
    Checkpoint,
    TrainingLog,
    distill_sample,
    mean_distill_kl,
    pair_items,
    run_distill_stage,
    run_hard_neg_stage,
    run_rerank_stage,
    run_stage,
    task_items,
)

MANIFEST_EXCLUDE = ("logs/", "manifest.json")
RETRIEVER_STAGES = (TEXT_ADAPT, CROSS_MODAL, INSTRUCTION_TUNE, HARD_NEG, DISTILL)


class Workspace:
    def __init__(self, root):
        self.root = Path(root)
        self._corpus: Optional[Corpus] = None

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    @property
    def corpus_dir(self) -> Path:
        return self.path("data", "corpus")

    def checkpoint(self, stage: str) -> Path:
        return self.path("checkpoints", f"{stage}.ckpt")

    def log(self, stage: str) -> Path:
        return self.path("logs", f"{stage}.jsonl")

    def mining(self, stage: str) -> Path:
        return self.path("mining", f"{stage}.jsonl")

    @property
    def teacher(self) -> Path:
        return self.path("teacher", "fused_scores.jsonl")

    @property
    def reports(self) -> Path:
        return self.path("reports")

    @property
    def figures(self) -> Path:
        return self.path("figures")

    def require(self, p: Path, what: str) -> Path:
        if not p.exists():
            raise ContractError(f"missing {what}: {p} (run the producing command first)")
        return p

    def corpus(self) -> Corpus:
        if self._corpus is None:
            self._corpus = read_corpus(self.require(self.corpus_dir, "corpus"))
        return self._corpus

    def load_checkpoint(self, stage: str) -> Checkpoint:
        return Checkpoint.load(self.require(self.checkpoint(stage), f"{stage} checkpoint"))


def write_resolved_config(cfg: RunConfig, ws: Workspace) -> Path:
    d = cfg.to_dict()
    d.pop("output_dir")
    d.pop("threads")
    p = ws.path("config.yaml")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(yaml.safe_dump(d, sort_keys=True))
    return p


# ---------------------------------------------------------------- steps


def gen_data(cfg: RunConfig, ws: Workspace) -> list:
    c = cfg.corpus
    corpus = generate_corpus(cfg.seed_for("corpus"), c.n_concepts, c.n_queries_per_task, c.noise,
                             pool_size=c.pool_size, test_fraction=c.test_fraction, min_len=c.min_len,
                             max_len=c.max_len, d_latent=c.d_latent)
    write_resolved_config(cfg, ws)
    paths = write_corpus(corpus, ws.corpus_dir)
    text = build_text_pretrain_pairs(corpus.concepts, cfg.seed_for("text_pairs"), c.text_pairs, c.pair_noise,
                                     c.min_len, c.max_len)
    image = build_text_image_pairs(corpus.concepts, cfg.seed_for("text_image_pairs"), c.text_image_pairs,
                                   c.pair_noise, c.min_len, c.max_len)
    paths.append(write_pairs(text, ws.path("data", "text_pairs.jsonl")))
    paths.append(write_pairs(image, ws.path("data", "text_image_pairs.jsonl")))
    ws._corpus = corpus
    return paths


def _init_for(cfg: RunConfig, ws: Workspace, stage: str) -> Checkpoint:
    prev = {CROSS_MODAL: TEXT_ADAPT, INSTRUCTION_TUNE: CROSS_MODAL, HARD_NEG: INSTRUCTION_TUNE,
            DISTILL: HARD_NEG, RERANK_TRAIN: HARD_NEG}.get(stage)
    if prev is None or (stage == INSTRUCTION_TUNE and not cfg.has_stage(CROSS_MODAL)):
        return Checkpoint.fresh(cfg.encoder.build(), cfg.seed_for("init"))
    return ws.load_checkpoint(prev)


def train_stage(cfg: RunConfig, ws: Workspace, stage: str) -> Checkpoint:
    """Run one retriever stage from its predecessor's checkpoint."""
    if stage == RERANK_TRAIN:
        return train_reranker(cfg, ws)
    if stage == DISTILL:
        return distill(cfg, ws)
    scfg = cfg.stage(stage)
    corpus = ws.corpus()
    init = _init_for(cfg, ws, stage)
    if stage == TEXT_ADAPT:
        items = pair_items(read_pairs(ws.require(ws.path("data", "text_pairs.jsonl"), "text pairs")))
    elif stage == CROSS_MODAL:
        items = pair_items(read_pairs(ws.require(ws.path("data", "text_image_pairs.jsonl"), "text-image pairs")))
    else:
        items = task_items(corpus.tasks, corpus.candidate)
    if stage == HARD_NEG:
        ck = _hard_neg(cfg, ws, scfg, init, items, corpus)
    else:
        ck = run_stage(scfg, init, items, log_path=ws.log(stage))
    ck.save(ws.checkpoint(stage))
    return ck


def _hard_neg(cfg, ws, scfg, init, items, corpus):
    mining = read_mining(ws.require(ws.mining(INSTRUCTION_TUNE), "instruction_tune mining file"))
    log = TrainingLog(ws.log(HARD_NEG))
    if not (scfg.remine and scfg.epochs > 1):
        return run_hard_neg_stage(scfg, init, items, mining, corpus.candidate, log=log)
    # re-mine with the current model before every epoch after the first
    ck = init
    train = corpus.split(TRAIN)
    for epoch in range(scfg.epochs):
        if epoch > 0:
            mining = mine_corpus(ck.retriever(cfg.threads), train, corpus.pools, cfg.mining.build(), cfg.threads)
        ck = run_hard_neg_stage(replace(scfg, epochs=1, seed=scfg.seed + epoch), ck, items, mining,
                                corpus.candidate, log=log)
    return ck


def mine(cfg: RunConfig, ws: Workspace, stage: str, checkpoint: Optional[Path] = None) -> Path:
    """Mine hard negatives for every training query with a frozen retriever."""
    ck = Checkpoint.load(checkpoint) if checkpoint else ws.load_checkpoint(stage)
    corpus = ws.corpus()
    res = mine_corpus(ck.retriever(cfg.threads), corpus.split(TRAIN), corpus.pools, cfg.mining.build(), cfg.threads)
    return write_mining(res, ws.mining(ck.stage or stage))


def train_reranker(cfg: RunConfig, ws: Workspace, mining_path: Optional[Path] = None) -> Checkpoint:
    corpus = ws.corpus()
    mining = read_mining(mining_path or ws.require(ws.mining(HARD_NEG), "hard_neg mining file"))
    train = corpus.split(TRAIN)
    examples = build_reranker_training_set(mining, train, cfg.reranker.n_negatives)
    ck = run_rerank_stage(cfg.stage(RERANK_TRAIN), ws.load_checkpoint(HARD_NEG), examples, train, corpus.candidate,
                          log_path=ws.log(RERANK_TRAIN))
    ck.save(ws.checkpoint(RERANK_TRAIN))
    return ck


def build_teacher(cfg: RunConfig, ws: Workspace, retriever_ck: Checkpoint, reranker_ck: Checkpoint) -> dict:
    """Fused teacher scores over positive + mined top-k for the distillation sample."""
    corpus = ws.corpus()
    scfg = cfg.stage(DISTILL)
    train = corpus.split(TRAIN)
    sample = distill_sample([t.query_id for t in train], scfg.sample_fraction, scfg.seed)
    mining = {m.query_id: m for m in read_mining(ws.require(ws.mining(HARD_NEG), "hard_neg mining file"))}
    by_id = {t.query_id: t for t in train}
    retriever = retriever_ck.retriever(cfg.threads)
    reranker = reranker_ck.reranker(cfg.threads)
    out = {}
    for q in sample:
        t = by_id[q]
        cids = [int(min(t.positive_ids))] + [c for c, _ in mining[q].hard_negatives[: cfg.mining.k]]
        seqs = [corpus.candidate(c) for c in cids]
        s_rec = score_pool(retriever.embed([t.query])[0], retriever.embed(seqs))
        if cfg.reranker.normalize_recall:
            s_rec = minmax_normalize(s_rec)
        out[q] = fuse_scores(s_rec, reranker.score(t.query, seqs), cfg.reranker.alpha, q, cids)
    p = ws.teacher
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w") as fh:
        for q in sorted(out):
            fh.write(json.dumps(out[q].to_dict(), sort_keys=True, separators=(",", ":")) + "\n")
    return out


def read_teacher(path) -> dict:
    with open(path) as fh:
        return {s.query_id: s for s in (FusedScoreSet.from_dict(json.loads(line)) for line in fh if line.strip())}


def distill(cfg: RunConfig, ws: Workspace, retriever_path: Optional[Path] = None,
            reranker_path: Optional[Path] = None) -> Checkpoint:
    corpus = ws.corpus()
    base = Checkpoint.load(retriever_path) if retriever_path else ws.load_checkpoint(HARD_NEG)
    rr = Checkpoint.load(reranker_path) if reranker_path else ws.load_checkpoint(RERANK_TRAIN)
    teacher = build_teacher(cfg, ws, base, rr)
    scfg = cfg.stage(DISTILL)
    ck = run_distill_stage(scfg, base, teacher, corpus.tasks, corpus.candidate, log_path=ws.log(DISTILL))
    ck.save(ws.checkpoint(DISTILL))
    ids = sorted(teacher)
    kl = {
        "sample_size": len(ids),
        "teacher_temp": scfg.teacher_temp,
        "kl_before": mean_distill_kl(base, teacher, corpus.tasks, corpus.candidate, ids, scfg.teacher_temp),
        "kl_after": mean_distill_kl(ck, teacher, corpus.tasks, corpus.candidate, ids, scfg.teacher_temp),
    }
    kl["kl_ratio"] = kl["kl_after"] / kl["kl_before"] if kl["kl_before"] > 0 else 0.0
    ws.reports.mkdir(parents=True, exist_ok=True)
    (ws.reports / "distill_kl.json").write_text(json.dumps(kl, sort_keys=True, indent=2) + "\n")
    return ck


# ---------------------------------------------------------------- evaluation


def _k_map(cfg: RunConfig) -> dict:
    return {int(k): int(v) for k, v in cfg.eval.k.items()}


def evaluate_checkpoint(cfg: RunConfig, ws: Workspace, ck: Checkpoint, name: str, scope: Optional[str] = None,
                        write: bool = True) -> EvalReport:
    corpus = ws.corpus()
    rep = evaluate(ck.retriever(cfg.threads), corpus.tasks, corpus.pools, scope or cfg.eval.scope, _k_map(cfg),
                   cfg.eval.metric, cfg.threads, fingerprint=cfg.fingerprint(), seed=cfg.seed)
    if write:
        rep.write(ws.reports, f"eval_{name}")
    return rep


def evaluate_pipeline(cfg: RunConfig, ws: Workspace, retriever_ck: Checkpoint, reranker_ck: Checkpoint,
                      scope: Optional[str] = None, name: str = "pipeline") -> EvalReport:
    corpus = ws.corpus()
    pipe = RecallThenRerank(retriever_ck.retriever(cfg.threads), reranker_ck.reranker(cfg.threads),
                            cfg.reranker.alpha, cfg.reranker.top_m, cfg.reranker.normalize_recall)
    rep, rankings = evaluate(None, corpus.tasks, corpus.pools, scope or cfg.eval.scope, _k_map(cfg), cfg.eval.metric,
                             cfg.threads, pipeline=pipe, fingerprint=cfg.fingerprint(), seed=cfg.seed,
                             return_rankings=True)
    rep.write(ws.reports, f"eval_{name}")
    for sc, rows in rankings.items():
        write_ranked_report([RankedResult(r.query_id, r.ranked_ids, r.fused) for r in rows],
                            ws.reports / f"ranked_{name}_{sc}.jsonl")
    cost = {"similarity_computations": pipe.counter.similarity_computations,
            "reranker_forwards": pipe.counter.reranker_forwards}
    (ws.reports / f"cost_{name}.json").write_text(json.dumps(cost, sort_keys=True, indent=2) + "\n")
    return rep


def evaluate_all(cfg: RunConfig, ws: Workspace, scope: Optional[str] = None) -> dict:
    """Evaluate the untrained model, every retriever checkpoint present, and the pipeline."""
    summary = {}
    fresh = Checkpoint.fresh(cfg.encoder.build(), cfg.seed_for("init"))
    summary["untrained"] = evaluate_checkpoint(cfg, ws, fresh, "untrained", scope)
    for stage in RETRIEVER_STAGES:
        if ws.checkpoint(stage).exists():
            summary[stage] = evaluate_checkpoint(cfg, ws, ws.load_checkpoint(stage), stage, scope)
    if cfg.eval.pipeline and ws.checkpoint(RERANK_TRAIN).exists() and ws.checkpoint(HARD_NEG).exists():
        summary["pipeline"] = evaluate_pipeline(cfg, ws, ws.load_checkpoint(HARD_NEG),
                                                ws.load_checkpoint(RERANK_TRAIN), scope)
    write_summary(ws, summary)
    return summary


def write_summary(ws: Workspace, summary: dict) -> Path:
    d = {name: {"local_avg": r.local_avg, "global_avg": r.global_avg} for name, r in summary.items()}
    p = ws.reports / "summary.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(d, sort_keys=True, indent=2) + "\n")
    return p


# ---------------------------------------------------------------- full run


def run_all(cfg: RunConfig, ws: Workspace, figures: bool = True) -> dict:
    """gen-data, the retriever stages, mining, reranker, distillation, eval."""
    gen_data(cfg, ws)
    for stage in (TEXT_ADAPT, CROSS_MODAL, INSTRUCTION_TUNE):
        if cfg.has_stage(stage):
            train_stage(cfg, ws, stage)
    if cfg.has_stage(HARD_NEG):
        mine(cfg, ws, INSTRUCTION_TUNE)
        train_stage(cfg, ws, HARD_NEG)
        mine(cfg, ws, HARD_NEG)
    if cfg.has_stage(RERANK_TRAIN):
        train_reranker(cfg, ws)
    if cfg.has_stage(DISTILL):
        distill(cfg, ws)
    summary = evaluate_all(cfg, ws)
    if figures:
        render_figures(cfg, ws, summary)
    write_manifest(cfg, ws)
    return summary


def render_figures(cfg: RunConfig, ws: Workspace, summary: dict) -> list:
    logs = {}
    for stage in (TEXT_ADAPT, CROSS_MODAL, INSTRUCTION_TUNE, HARD_NEG, RERANK_TRAIN, DISTILL):
        p = ws.log(stage)
        if p.exists():
            with open(p) as fh:
                logs[stage] = [json.loads(line) for line in fh if line.strip()]
    out = []
    if logs:
        out.append(plotting.loss_curves(logs, ws.figures / "loss_curves.png"))
        out.append(plotting.temperature_trajectory(logs, ws.figures / "temperature.png"))
    if summary:
        out.append(plotting.stage_summary(summary, ws.figures / "stage_summary.png"))
        last = summary.get(DISTILL) or summary.get(HARD_NEG) or next(reversed(summary.values()))
        out.append(plotting.task_breakdown(last, ws.figures / "task_breakdown.png"))
    return out


def sha256_file(p: Path) -> str:
    h = hashlib.sha256()
    with open(p, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(cfg: RunConfig, ws: Workspace) -> Path:
    """Config fingerprint, seed and a hash of every artifact except logs."""
    artifacts = {}
    for p in sorted(ws.root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(ws.root).as_posix()
        if any(rel == e or rel.startswith(e) for e in MANIFEST_EXCLUDE):
            continue
        artifacts[rel] = sha256_file(p)
    manifest = {
        "format": "mmret-manifest",
        "version": 1,
        "config_fingerprint": cfg.fingerprint(),
        "seed": cfg.seed,
        "artifacts": artifacts,
    }
    p = ws.path("manifest.json")
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return p


def chance_level(corpus: Corpus, k_per_task: Optional[dict] = None) -> float:
    """Expected local Recall@k of a random ranking, averaged over tasks."""
    k_per_task = k_per_task or {}
    vals = []
    by_pool = corpus.pools_by_id
    for tt in sorted({t.task_type for t in corpus.tasks}):
        t = next(x for x in corpus.tasks if x.task_type == tt)
        k = k_per_task.get(tt, t.task.recall_k)
        vals.append(min(1.0, k / len(by_pool[t.pool_id])))
    return float(np.mean(vals))
