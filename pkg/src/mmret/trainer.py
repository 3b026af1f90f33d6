"""Stage driver, optimizer and checkpoints for progressive retriever training."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from mmret.corpus import TRAIN, TaskInstance, TokenSequence
from mmret.encoder import BIDIRECTIONAL, CAUSAL, EncoderConfig, Retriever, encode_tracked, init_params
from mmret.errors import ConfigError, ContractError, NumericError
from mmret.miner import MiningResult, RerankExample
from mmret.objectives import (
    BI,
    UNI,
    FusedScoreSet,
    HardNegativeSims,
    SimilarityMatrix,
    Temperature,
    distill_kl,
    info_nce,
    info_nce_with_hard_negs,
    rerank_nll,
    similarity,
)
from mmret.reranker import RerankerModel, init_reranker_params, join, reranker_config, reranker_logits_tracked
from mmret.tensor import Parameter, Tape, as_node, ops

TEXT_ADAPT = "text_adapt"
CROSS_MODAL = "cross_modal"
INSTRUCTION_TUNE = "instruction_tune"
HARD_NEG = "hard_neg"
DISTILL = "distill"
RERANK_TRAIN = "rerank_train"
STAGES = (TEXT_ADAPT, CROSS_MODAL, INSTRUCTION_TUNE, HARD_NEG, RERANK_TRAIN, DISTILL)

# Accepted predecessor of each stage; None means a fresh initialisation.
PREDECESSORS = {
    TEXT_ADAPT: (None,),
    CROSS_MODAL: (TEXT_ADAPT,),
    INSTRUCTION_TUNE: (CROSS_MODAL, None),
    HARD_NEG: (INSTRUCTION_TUNE, HARD_NEG),
    DISTILL: (HARD_NEG,),
    RERANK_TRAIN: (HARD_NEG,),
}

DATA_SOURCES = {
    TEXT_ADAPT: "text_pairs",
    CROSS_MODAL: "text_image_pairs",
    INSTRUCTION_TUNE: "tasks",
    HARD_NEG: "tasks",
    DISTILL: "tasks",
    RERANK_TRAIN: "tasks",
}

BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"MMRET-CKPT\n"
CHECKPOINT_VERSION = 1


def scale_lr(base_lr: float, base_batch: int, new_batch: int) -> float:
    """Square-root learning-rate scaling for a batch-size change."""
    if base_batch <= 0 or new_batch <= 0:
        raise ContractError("batch sizes must be positive")
    if new_batch == base_batch:
        return float(base_lr)
    return float(base_lr * math.sqrt(new_batch / base_batch))


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.step, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def optimizer_step(params: dict, grads: dict, lr: float, state: AdamState,
                   betas=BETAS, eps: float = ADAM_EPS) -> AdamState:
    """One bias-corrected adaptive-moment update, in place on ``params``.

    Parameters without a gradient (or flagged non-trainable) are left alone.
    Moments are kept in float64 so the update is reproducible and precise.
    """
    b1, b2 = betas
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None or not p.trainable:
            continue
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name)
        if m is None:
            m = np.zeros(p.data.shape)
            v = np.zeros(p.data.shape)
        else:
            v = state.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        upd = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data[...] = (p.data.astype(np.float64) - upd).astype(p.data.dtype)
        state.m[name] = m
        state.v[name] = v
    state.step = t
    return state


# ---------------------------------------------------------------- configs


@dataclass(frozen=True)
class TemperatureSpec:
    mode: str = "fixed"
    init: Optional[float] = 0.05  # None: inherit the checkpoint's value

    def __post_init__(self):
        if self.mode not in ("fixed", "learnable"):
            raise ConfigError(f"unknown temperature mode {self.mode!r}")
        if self.init is not None and not self.init > 0:
            raise ConfigError("temperature init must be positive")


@dataclass(frozen=True)
class StageConfig:
    stage: str
    batch_size: int = 64
    lr: float = 1e-3
    epochs: int = 1
    temperature: TemperatureSpec = TemperatureSpec()
    attention_mode_override: Optional[str] = None
    loss_direction: str = BI
    data_source: Optional[str] = None
    seed: int = 0
    steps: Optional[int] = None  # overrides epochs when set
    hard_negatives_per_query: int = 4
    include_in_batch: bool = True
    remine: bool = False
    sample_fraction: float = 0.10
    teacher_temp: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.epochs < 0 or (self.steps is not None and self.steps < 0):
            raise ConfigError("epochs and steps must be >= 0")
        if self.attention_mode_override not in (None, CAUSAL, BIDIRECTIONAL):
            raise ConfigError(f"unknown attention mode {self.attention_mode_override!r}")
        if self.loss_direction not in (UNI, BI):
            raise ConfigError(f"unknown loss direction {self.loss_direction!r}")
        source = self.data_source or DATA_SOURCES[self.stage]
        if source != DATA_SOURCES[self.stage]:
            raise ConfigError(f"stage {self.stage} needs data_source {DATA_SOURCES[self.stage]!r}, got {source!r}")
        object.__setattr__(self, "data_source", source)
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigError("sample_fraction must lie in (0, 1]")
        if not self.teacher_temp > 0:
            raise ConfigError("teacher_temp must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        if isinstance(d.get("temperature"), dict):
            d["temperature"] = TemperatureSpec(**d["temperature"])
        return cls(**d)

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def default_schedule(seed: int = 0) -> list:
    """Five retriever stages plus reranker training, in execution order.

    The reranker trains before distillation because it provides the teacher.
    """
    fixed = TemperatureSpec("fixed", 0.05)
    learn = TemperatureSpec("learnable", 0.05)
    inherit = TemperatureSpec("learnable", None)
    return [
        StageConfig(TEXT_ADAPT, 64, 1e-3, temperature=fixed, attention_mode_override=CAUSAL, loss_direction=UNI, seed=seed),
        StageConfig(CROSS_MODAL, 64, 1e-3, temperature=fixed, attention_mode_override=BIDIRECTIONAL, seed=seed),
        StageConfig(INSTRUCTION_TUNE, 256, 1e-3, temperature=learn, seed=seed),
        StageConfig(HARD_NEG, 128, 5e-4, temperature=inherit, seed=seed),
        StageConfig(RERANK_TRAIN, 64, 1e-3, seed=seed),
        StageConfig(DISTILL, 32, 1e-4, temperature=inherit, seed=seed),
    ]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    stage: Optional[str]
    lineage: list
    step: int
    encoder: EncoderConfig
    params: dict
    temperature: Temperature
    fingerprint: str = ""
    complete: bool = True
    kind: str = "retriever"
    optimizer: Optional[AdamState] = None
    stage_seed: Optional[int] = None

    @classmethod
    def fresh(cls, encoder: EncoderConfig, seed: int) -> "Checkpoint":
        return cls(None, [], 0, encoder, init_params(encoder, seed), Temperature("fixed", 0.05))

    def copy(self) -> "Checkpoint":
        params = {n: Parameter(n, p.data.copy(), p.trainable) for n, p in self.params.items()}
        t = self.temperature
        temp = Temperature(t.mode, t.value, None if t.param is None else Parameter(t.param.name, t.param.data.copy()))
        return Checkpoint(self.stage, list(self.lineage), self.step, self.encoder, params, temp, self.fingerprint,
                          self.complete, self.kind, None if self.optimizer is None else self.optimizer.copy(),
                          self.stage_seed)

    def retriever(self, threads: int = 1) -> Retriever:
        if self.kind != "retriever":
            raise ContractError(f"checkpoint of kind {self.kind!r} is not a retriever")
        return Retriever(self.encoder, self.params, threads)

    def reranker(self, threads: int = 1) -> RerankerModel:
        if self.kind != "reranker":
            raise ContractError(f"checkpoint of kind {self.kind!r} is not a reranker")
        return RerankerModel(self.encoder, self.params, threads)

    # serialisation: magic line, one JSON header line, raw little-endian float32 payload

    def _tensors(self) -> list:
        out = [(n, self.params[n].data) for n in sorted(self.params)]
        if self.temperature.param is not None:
            out.append(("__temperature__.log_tau", self.temperature.param.data))
        if self.optimizer is not None:
            for n in sorted(self.optimizer.m):
                out.append((f"__adam_m__.{n}", self.optimizer.m[n]))
                out.append((f"__adam_v__.{n}", self.optimizer.v[n]))
        return out

    def to_bytes(self) -> bytes:
        table, chunks, offset = [], [], 0
        for name, arr in self._tensors():
            dtype = "<f8" if name.startswith("__adam") else "<f4"
            raw = np.asarray(arr, order="C", dtype=dtype).tobytes()
            entry = {"name": name, "shape": list(np.shape(arr)), "offset": offset, "dtype": dtype}
            if name in self.params:
                entry["trainable"] = bool(self.params[name].trainable)
            table.append(entry)
            chunks.append(raw)
            offset += len(raw)
        header = {
            "version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "stage": self.stage,
            "lineage": self.lineage,
            "step": self.step,
            "complete": self.complete,
            "fingerprint": self.fingerprint,
            "stage_seed": self.stage_seed,
            "encoder": self.encoder.to_dict(),
            "temperature": {"mode": self.temperature.mode, "value": self.temperature.value},
            "optimizer_step": None if self.optimizer is None else self.optimizer.step,
            "tensors": table,
            "payload_bytes": offset,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n"
        return CHECKPOINT_MAGIC + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(CHECKPOINT_MAGIC):
            raise ContractError("not a checkpoint file (bad magic line)")
        rest = blob[len(CHECKPOINT_MAGIC):]
        nl = rest.index(b"\n")
        header = json.loads(rest[:nl])
        if header["version"] != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header['version']}")
        payload = rest[nl + 1:]
        if len(payload) != header["payload_bytes"]:
            raise ContractError("checkpoint payload is truncated")
        params, extra = {}, {}
        for e in header["tensors"]:
            dt = np.dtype(e["dtype"])
            n = int(np.prod(e["shape"], dtype=np.int64))
            arr = np.frombuffer(payload, dtype=dt, count=n, offset=e["offset"]).reshape(e["shape"])
            arr = arr.astype(dt.newbyteorder("="), copy=True)
            if e["name"].startswith("__"):
                extra[e["name"]] = arr
            else:
                params[e["name"]] = Parameter(e["name"], arr, e.get("trainable", True))
        t = header["temperature"]
        log_tau = extra.get("__temperature__.log_tau")
        temp = Temperature(t["mode"], t["value"], None if log_tau is None else Parameter("log_tau", log_tau))
        opt = None
        if header["optimizer_step"] is not None:
            opt = AdamState(header["optimizer_step"])
            for k, arr in extra.items():
                if k.startswith("__adam_m__."):
                    opt.m[k[len("__adam_m__."):]] = arr
                elif k.startswith("__adam_v__."):
                    opt.v[k[len("__adam_v__."):]] = arr
        return cls(header["stage"], list(header["lineage"]), header["step"], EncoderConfig.from_dict(header["encoder"]),
                   params, temp, header["fingerprint"], header["complete"], header["kind"], opt, header["stage_seed"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class TrainItem:
    item_id: int
    query: TokenSequence
    positive: TokenSequence
    positive_id: int
    group: int  # items sharing a group never share a batch


def pair_items(pairs) -> list:
    """Training items from ``(query, positive)`` pairs; grouped by concept."""
    return [TrainItem(i, q, p, i, q.concept_id) for i, (q, p) in enumerate(pairs)]


def task_items(tasks: Sequence[TaskInstance], candidate_lookup: Callable[[int], TokenSequence]) -> list:
    out = []
    for t in sorted(tasks, key=lambda t: t.query_id):
        if t.split != TRAIN:
            continue
        pid = int(min(t.positive_ids))
        out.append(TrainItem(t.query_id, t.query, candidate_lookup(pid), pid, t.query.concept_id))
    return out


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def epoch_batches(items: Sequence[TrainItem], batch_size: int, seed: int, epoch: int) -> list:
    """Seeded shuffle packed into batches with no repeated group.

    Items whose group is already in the open batch wait for a later one, so
    ``batch_size`` is an upper bound.  Pure function of its arguments.
    """
    order = _rng(seed, 101, epoch).permutation(len(items))
    pending = [int(i) for i in order]
    batches = []
    while pending:
        batch, groups, rest = [], set(), []
        for i in pending:
            g = items[i].group
            if len(batch) < batch_size and g not in groups:
                batch.append(i)
                groups.add(g)
            else:
                rest.append(i)
        batches.append(batch)
        pending = rest
    return batches


class BatchSchedule:
    """Maps a global step to its batch; depends only on (items, batch size, seed, step)."""

    def __init__(self, items, batch_size: int, seed: int):
        self.items = items
        self.batch_size = batch_size
        self.seed = seed
        self._cache: dict = {}

    def batch(self, step: int) -> list:
        epoch, k = 0, step
        while True:
            if epoch not in self._cache:
                self._cache[epoch] = epoch_batches(self.items, self.batch_size, self.seed, epoch)
            if k < len(self._cache[epoch]):
                return self._cache[epoch][k]
            k -= len(self._cache[epoch])
            epoch += 1

    def steps(self, cfg: StageConfig) -> int:
        """Explicit ``cfg.steps``, else the batches in ``cfg.epochs`` epochs."""
        if cfg.steps is not None:
            return cfg.steps
        if not self.items:
            return 0
        total = 0
        for epoch in range(cfg.epochs):
            if epoch not in self._cache:
                self._cache[epoch] = epoch_batches(self.items, self.batch_size, self.seed, epoch)
            total += len(self._cache[epoch])
        return total


# ---------------------------------------------------------------- stage driver


class TrainingLog:
    """One JSON record per step; wall time makes it non-deterministic by design."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records: list = []
        self._t0 = time.perf_counter()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def log(self, **rec):
        rec["wall_time"] = round(time.perf_counter() - self._t0, 6)
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @property
    def losses(self) -> list:
        return [r["loss"] for r in self.records]

    @property
    def taus(self) -> list:
        return [r["tau"] for r in self.records]


def _check_lineage(cfg: StageConfig, init: Checkpoint):
    if not init.complete:
        if init.stage != cfg.stage:
            raise ContractError(f"partial {init.stage} checkpoint cannot start stage {cfg.stage}")
        if init.fingerprint != cfg.fingerprint():
            raise ContractError("partial checkpoint was produced by a different stage config")
        return
    if init.stage not in PREDECESSORS[cfg.stage]:
        want = ", ".join("fresh" if p is None else p for p in PREDECESSORS[cfg.stage])
        raise ContractError(f"stage {cfg.stage} needs a checkpoint from {want}, got {init.stage or 'fresh'}")


def _stage_temperature(spec: TemperatureSpec, init: Checkpoint) -> Temperature:
    if spec.init is None:
        base = init.temperature.effective
    else:
        base = spec.init
    return Temperature(spec.mode, base)


def _start(cfg: StageConfig, init: Checkpoint, kind: str = "retriever"):
    _check_lineage(cfg, init)
    ck = init.copy()
    if init.complete:
        ck.temperature = _stage_temperature(cfg.temperature, init)
        ck.step = 0
        ck.optimizer = AdamState()
        ck.lineage = list(init.lineage) + ([init.stage] if init.stage else [])
        ck.stage = cfg.stage
        ck.complete = False
        ck.fingerprint = cfg.fingerprint()
        ck.stage_seed = cfg.seed
        ck.kind = kind
    return ck


def _finish(ck: Checkpoint, total: int, stop_after: Optional[int]) -> Checkpoint:
    if stop_after is None or ck.step >= total:
        ck.complete = True
        ck.optimizer = None
    return ck


def _trainable(ck: Checkpoint) -> dict:
    out = dict(ck.params)
    if ck.temperature.param is not None:
        out["log_tau"] = ck.temperature.param
    return out


def _run_loop(cfg: StageConfig, ck: Checkpoint, total: int, loss_fn, batch_fn, log: TrainingLog,
              stop_after: Optional[int]) -> Checkpoint:
    """Shared step loop.  ``loss_fn(tape, P, batch) -> scalar node``."""
    enc_cfg = ck.encoder
    if cfg.attention_mode_override is not None:
        enc_cfg = enc_cfg.replace(attention_mode=cfg.attention_mode_override)
    end = total if stop_after is None else min(total, stop_after)
    params = _trainable(ck)
    while ck.step < end:
        batch = batch_fn(ck.step)
        tape = Tape()
        P = {n: tape.watch(p) if p.trainable else as_node(p) for n, p in ck.params.items()}
        loss = loss_fn(tape, enc_cfg, P, batch)
        value = float(loss.item())
        if not math.isfinite(value):
            ids = [getattr(b, "item_id", b) for b in batch]
            log.log(step=ck.step, loss=value, tau=ck.temperature.effective, lr=cfg.lr, batch_ids=ids)
            raise NumericError(f"non-finite loss at step {ck.step} of stage {cfg.stage}", ids)
        tape.backward(loss)
        grads = {n: tape.grad(p) for n, p in params.items() if p.trainable}
        grads = {n: g for n, g in grads.items() if g is not None}
        bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
        if bad:
            ids = [getattr(b, "item_id", b) for b in batch]
            raise NumericError(f"non-finite gradient for {bad[0]} at step {ck.step} of stage {cfg.stage}", ids)
        tape.release()
        optimizer_step(params, grads, cfg.lr, ck.optimizer)
        ck.temperature.project()
        ck.step += 1
        log.log(step=ck.step, loss=value, tau=ck.temperature.effective, lr=cfg.lr)
    return _finish(ck, total, stop_after)


def _contrastive_loss(cfg: StageConfig, temp: Temperature, items, hard_fn=None):
    def loss_fn(tape, enc_cfg, P, batch):
        rows = [items[i] for i in batch]
        n = len(rows)
        seqs = [r.query for r in rows] + [r.positive for r in rows]
        extra = [] if hard_fn is None else hard_fn(rows)
        hard_seqs = [s for per in extra for _, s in per]
        emb = encode_tracked(enc_cfg, P, seqs + hard_seqs)
        q = ops.take(emb, np.arange(n))
        c = ops.take(emb, np.arange(n, 2 * n))
        sim = SimilarityMatrix(similarity(q, c), np.arange(n))
        if hard_fn is None:
            return info_nce(sim, temp, cfg.loss_direction, tape)
        K = max((len(per) for per in extra), default=0)
        if K == 0:
            hard = HardNegativeSims(None, np.zeros((n, 0), bool), np.zeros((n, 0), np.int64),
                                    [r.positive_id for r in rows])
            return info_nce_with_hard_negs(sim, hard, temp, cfg.loss_direction, cfg.include_in_batch, tape)
        # per-row hard negative sims, padded to K
        h = ops.take(emb, np.arange(2 * n, 2 * n + len(hard_seqs)))
        flat_idx = np.zeros((n, K), dtype=np.int64)
        mask = np.zeros((n, K), dtype=bool)
        cids = np.full((n, K), -1, dtype=np.int64)
        pos = 0
        for r, per in enumerate(extra):
            for j, (cid, _) in enumerate(per):
                flat_idx[r, j] = pos
                mask[r, j] = True
                cids[r, j] = cid
                pos += 1
        allsims = similarity(q, h)  # (n, H)
        gather = np.arange(n)[:, None] * len(hard_seqs) + flat_idx
        hs = ops.reshape(ops.take(ops.reshape(allsims, (n * len(hard_seqs),)), gather.reshape(-1)), (n, K))
        hard = HardNegativeSims(hs, mask, cids, [r.positive_id for r in rows])
        return info_nce_with_hard_negs(sim, hard, temp, cfg.loss_direction, cfg.include_in_batch, tape)

    return loss_fn


def run_stage(cfg: StageConfig, init: Checkpoint, items: Sequence[TrainItem], log_path=None,
              stop_after: Optional[int] = None, log: Optional[TrainingLog] = None) -> Checkpoint:
    """Train one contrastive stage (text_adapt, cross_modal or instruction_tune).

    ``stop_after`` halts at that global step and returns a resumable partial
    checkpoint; passing it back as ``init`` continues the same stage.
    """
    if cfg.stage not in (TEXT_ADAPT, CROSS_MODAL, INSTRUCTION_TUNE):
        raise ContractError(f"run_stage does not drive stage {cfg.stage}")
    ck = _start(cfg, init)
    log = log or TrainingLog(log_path)
    sched = BatchSchedule(items, cfg.batch_size, cfg.seed)
    total = sched.steps(cfg)
    return _run_loop(cfg, ck, total, _contrastive_loss(cfg, ck.temperature, items), sched.batch, log, stop_after)


def run_hard_neg_stage(cfg: StageConfig, init: Checkpoint, items: Sequence[TrainItem], mining: Sequence[MiningResult],
                       candidate_lookup: Callable[[int], TokenSequence], log_path=None,
                       stop_after: Optional[int] = None, log: Optional[TrainingLog] = None) -> Checkpoint:
    """Continual contrastive training with mined hard negatives in each row's denominator."""
    if cfg.stage != HARD_NEG:
        raise ContractError("run_hard_neg_stage needs a hard_neg StageConfig")
    by_query = {m.query_id: m for m in mining}
    ck = _start(cfg, init)
    log = log or TrainingLog(log_path)
    sched = BatchSchedule(items, cfg.batch_size, cfg.seed)
    total = sched.steps(cfg)
    k = cfg.hard_negatives_per_query

    def hard_fn(rows):
        missing = [r.item_id for r in rows if r.item_id not in by_query]
        if missing:
            raise ContractError(f"no mining entry for sampled queries {missing[:10]}")
        return [[(cid, candidate_lookup(cid)) for cid, _ in by_query[r.item_id].hard_negatives[:k]] for r in rows]

    loss_fn = _contrastive_loss(cfg, ck.temperature, items, hard_fn)
    return _run_loop(cfg, ck, total, loss_fn, sched.batch, log, stop_after)


def distill_sample(query_ids: Sequence[int], fraction: float, seed: int) -> list:
    """Uniform seeded subset of ``round(fraction * n)`` query ids, sorted."""
    ids = sorted(int(q) for q in query_ids)
    n = int(round(fraction * len(ids)))
    if n == 0:
        return []
    pick = _rng(seed, 202).choice(len(ids), size=n, replace=False)
    return sorted(ids[i] for i in pick)


def _distill_loss(cfg: StageConfig, temp: Temperature, queries: dict, teachers: dict,
                  candidate_lookup: Callable[[int], TokenSequence]):
    def loss_fn(tape, enc_cfg, P, batch):
        ts = [teachers[q] for q in batch]
        cmax = max(len(t.candidate_ids) for t in ts)
        cand_ids = sorted({c for t in ts for c in t.candidate_ids})
        col = {c: j for j, c in enumerate(cand_ids)}
        emb = encode_tracked(enc_cfg, P, [queries[q] for q in batch] + [candidate_lookup(c) for c in cand_ids])
        n = len(batch)
        sims = similarity(ops.take(emb, np.arange(n)), ops.take(emb, np.arange(n, n + len(cand_ids))))
        gather = np.zeros((n, cmax), dtype=np.int64)
        for r, t in enumerate(ts):
            row = [r * len(cand_ids) + col[c] for c in t.candidate_ids]
            gather[r, : len(row)] = row
            gather[r, len(row):] = row[0]  # padding, masked inside distill_kl
        s = ops.reshape(ops.take(ops.reshape(sims, (n * len(cand_ids),)), gather.reshape(-1)), (n, cmax))
        return distill_kl(ts, s, temp, cfg.teacher_temp,
                          [list(t.candidate_ids) for t in ts], tape)

    return loss_fn


def run_distill_stage(cfg: StageConfig, init: Checkpoint, teacher_scores: dict, tasks: Sequence[TaskInstance],
                      candidate_lookup: Callable[[int], TokenSequence], sample_fraction: Optional[float] = None,
                      log_path=None, stop_after: Optional[int] = None,
                      log: Optional[TrainingLog] = None) -> Checkpoint:
    """Fit the retriever to the fused teacher distribution on a sampled query subset.

    ``teacher_scores`` maps query id to :class:`FusedScoreSet`.
    """
    if cfg.stage != DISTILL:
        raise ContractError("run_distill_stage needs a distill StageConfig")
    frac = cfg.sample_fraction if sample_fraction is None else sample_fraction
    if not 0.0 < frac <= 1.0:
        raise ContractError("sample_fraction must lie in (0, 1]")
    train = [t for t in tasks if t.split == TRAIN]
    sample = distill_sample([t.query_id for t in train], frac, cfg.seed)
    missing = [q for q in sample if q not in teacher_scores]
    if missing:
        raise ContractError(f"teacher scores missing for query ids {missing}")
    ck = _start(cfg, init)
    log = log or TrainingLog(log_path)
    if not sample:
        ck.complete = True
        ck.optimizer = None
        return ck
    queries = {t.query_id: t.query for t in train}
    items = [TrainItem(q, queries[q], queries[q], q, q) for q in sample]
    sched = BatchSchedule(items, cfg.batch_size, cfg.seed)
    total = sched.steps(cfg)

    def batch_fn(step):
        return [items[i].item_id for i in sched.batch(step)]

    loss_fn = _distill_loss(cfg, ck.temperature, queries, teacher_scores, candidate_lookup)
    return _run_loop(cfg, ck, total, loss_fn, batch_fn, log, stop_after)


def mean_distill_kl(ck: Checkpoint, teacher_scores: dict, tasks: Sequence[TaskInstance],
                    candidate_lookup: Callable[[int], TokenSequence], query_ids: Sequence[int],
                    teacher_temp: float = 1.0) -> float:
    """Mean per-query KL(teacher || student) for ``query_ids``, untracked."""
    if not query_ids:
        return 0.0
    queries = {t.query_id: t.query for t in tasks}
    cfg = StageConfig(DISTILL, teacher_temp=teacher_temp)
    loss_fn = _distill_loss(cfg, ck.temperature, queries, teacher_scores, candidate_lookup)
    P = {n: as_node(p) for n, p in ck.params.items()}
    total = 0.0
    ids = sorted(query_ids)
    for s in range(0, len(ids), 64):
        chunk = ids[s : s + 64]
        total += float(loss_fn(None, ck.encoder, P, chunk).item()) * len(chunk)
    return total / len(ids)


# ---------------------------------------------------------------- reranker training


def run_rerank_stage(cfg: StageConfig, init: Checkpoint, examples: Sequence[RerankExample],
                     tasks: Sequence[TaskInstance], candidate_lookup: Callable[[int], TokenSequence],
                     log_path=None, stop_after: Optional[int] = None,
                     log: Optional[TrainingLog] = None) -> Checkpoint:
    """Train the pointwise reranker on yes/no pairs.

    A complete hard_neg retriever checkpoint warm-starts the encoder; a zero
    head is added on top.
    """
    if cfg.stage != RERANK_TRAIN:
        raise ContractError("run_rerank_stage needs a rerank_train StageConfig")
    if init.complete:
        _check_lineage(cfg, init)
        enc = reranker_config(init.encoder)
        base = init.copy()
        base.params = init_reranker_params(enc, cfg.seed, init.params)
        base.encoder = enc
        init = base
    ck = _start(cfg, init, kind="reranker")
    ck.temperature = Temperature("fixed", 1.0)
    log = log or TrainingLog(log_path)
    queries = {t.query_id: t.query for t in tasks}
    examples = sorted(examples, key=lambda e: (e.query_id, e.candidate_id))
    items = [TrainItem(i, queries[e.query_id], candidate_lookup(e.candidate_id), e.candidate_id, i)
             for i, e in enumerate(examples)]
    labels = np.array([e.label for e in examples])
    sched = BatchSchedule(items, cfg.batch_size, cfg.seed)
    total = sched.steps(cfg)

    def loss_fn(tape, enc_cfg, P, batch):
        joined = [join(items[i].query, items[i].positive, enc_cfg.max_len) for i in batch]
        logits = reranker_logits_tracked(enc_cfg, P, joined)
        return ops.mean(rerank_nll(logits, labels[batch]))

    return _run_loop(cfg, ck, total, loss_fn, sched.batch, log, stop_after)


def teacher_store_from_list(scores: Sequence[FusedScoreSet]) -> dict:
    return {s.query_id: s for s in scores}
