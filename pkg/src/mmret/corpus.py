"""Synthetic multimodal retrieval corpora with exact ground truth.

Every concept owns a disjoint slice of the text vocabulary and of the image
vocabulary.  Each slice is split in half: queries sample from the first half
("query role") and candidates from the second half ("candidate role"), so a
retriever has to learn the association instead of matching identical ids.
Noise replaces a token, with probability ``noise``, by a token from a concept
that is close in latent space, which produces realistic hard negatives.

Eight task types mirror the query->candidate modality patterns of M-BEIR.
Each task type has one local pool holding one candidate per concept.  The
first ``n_concepts`` concepts carry queries; the remaining ``pool_size -
n_concepts`` are background distractors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from mmret.errors import ContractError

TEXT = "text"
IMAGE = "image"

TEXT_RANGE = (0, 4096)
IMAGE_RANGE = (4096, 8192)
INSTRUCTION_RANGE = (8192, 8256)
SUFFIX_TOKENS = (8256, 8257, 8258, 8259, 8260)
EMB_TOKEN = 8261
SEP_TOKEN = 8262
VOCAB_SIZE = 8263

LOCAL = "local"
GLOBAL = "global"
TRAIN = "train"
TEST = "test"

MAX_SUPPORT = 16
NEIGHBOR_SHARPNESS = 4.0


@dataclass(frozen=True)
class TaskType:
    index: int
    name: str
    query_modality: tuple
    candidate_modality: tuple
    dataset: str
    domain: str
    recall_k: int


TASK_TYPES = (
    TaskType(1, "qt->ci", (TEXT,), (IMAGE,), "news-caption", "news", 5),
    TaskType(2, "qt->ct", (TEXT,), (TEXT,), "wiki-qa", "wiki", 5),
    TaskType(3, "qt->(ci,ct)", (TEXT,), (IMAGE, TEXT), "news-entity", "news", 5),
    TaskType(4, "qi->ct", (IMAGE,), (TEXT,), "fashion-caption", "fashion", 10),
    TaskType(5, "qi->ci", (IMAGE,), (IMAGE,), "identical-image", "misc", 5),
    TaskType(6, "(qi,qt)->ct", (IMAGE, TEXT), (TEXT,), "visual-qa", "wiki", 5),
    TaskType(7, "(qi,qt)->ci", (IMAGE, TEXT), (IMAGE,), "fashion-edit", "fashion", 10),
    TaskType(8, "(qi,qt)->(ci,ct)", (IMAGE, TEXT), (IMAGE, TEXT), "visual-qa-pair", "wiki", 5),
)
TASKS_BY_INDEX = {t.index: t for t in TASK_TYPES}


def instruction_tokens(task_index: int) -> tuple:
    """Fixed instruction template for a task type: 4-8 ids from the reserved range."""
    length = 4 + (task_index - 1) % 5
    base = INSTRUCTION_RANGE[0] + 8 * (task_index - 1)
    return tuple(range(base, base + length))


def task_from_instruction(tokens: Sequence[int]) -> TaskType:
    """Recover the task type (and so the target modality) from an instruction fragment."""
    if not tokens:
        raise ContractError("empty instruction fragment")
    first = int(tokens[0])
    if not INSTRUCTION_RANGE[0] <= first < INSTRUCTION_RANGE[1]:
        raise ContractError(f"token {first} is not an instruction token")
    task = TASKS_BY_INDEX[(first - INSTRUCTION_RANGE[0]) // 8 + 1]
    if tuple(tokens) != instruction_tokens(task.index):
        raise ContractError("instruction fragment does not match any template")
    return task


def pool_name(task_index: int) -> str:
    return f"task{task_index}"


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple
    modality_tags: tuple
    instruction_span: Optional[tuple] = None
    concept_id: int = -1

    def __post_init__(self):
        if len(self.tokens) != len(self.modality_tags):
            raise ContractError("modality_tags length differs from tokens length")
        if self.instruction_span is not None:
            lo, hi = self.instruction_span
            if not 0 <= lo <= hi <= len(self.tokens):
                raise ContractError(f"instruction_span {self.instruction_span} out of bounds")
            if any(tag != TEXT for tag in self.modality_tags[lo:hi]):
                raise ContractError("instruction tokens must carry the text tag")

    def __len__(self):
        return len(self.tokens)

    @property
    def modalities(self) -> tuple:
        """Ordered distinct modalities of the non-instruction tokens."""
        lo, hi = self.instruction_span or (0, 0)
        seen = []
        for i, tag in enumerate(self.modality_tags):
            if lo <= i < hi:
                continue
            if tag not in seen:
                seen.append(tag)
        return tuple(seen)

    def without_instruction(self) -> "TokenSequence":
        if self.instruction_span is None:
            return self
        lo, hi = self.instruction_span
        return TokenSequence(
            self.tokens[:lo] + self.tokens[hi:],
            self.modality_tags[:lo] + self.modality_tags[hi:],
            None,
            self.concept_id,
        )

    def to_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "modality_tags": list(self.modality_tags),
            "instruction_span": None if self.instruction_span is None else list(self.instruction_span),
            "concept_id": self.concept_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenSequence":
        span = d.get("instruction_span")
        return cls(
            tuple(int(t) for t in d["tokens"]),
            tuple(d["modality_tags"]),
            None if span is None else (int(span[0]), int(span[1])),
            int(d["concept_id"]),
        )


@dataclass(frozen=True)
class Concept:
    id: int
    latent: tuple
    text_support: tuple
    text_probs: tuple
    image_support: tuple
    image_probs: tuple

    def profile(self, modality: str):
        if modality == TEXT:
            return np.asarray(self.text_support), np.asarray(self.text_probs)
        return np.asarray(self.image_support), np.asarray(self.image_probs)

    def role_profile(self, modality: str, role: str):
        support, probs = self.profile(modality)
        half = len(support) // 2
        sl = slice(0, half) if role == "query" else slice(half, None)
        p = probs[sl]
        return support[sl], p / p.sum()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "latent": list(self.latent),
            "text_profile": {"ids": list(self.text_support), "probs": list(self.text_probs)},
            "image_profile": {"ids": list(self.image_support), "probs": list(self.image_probs)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Concept":
        return cls(
            int(d["id"]),
            tuple(float(v) for v in d["latent"]),
            tuple(int(v) for v in d["text_profile"]["ids"]),
            tuple(float(v) for v in d["text_profile"]["probs"]),
            tuple(int(v) for v in d["image_profile"]["ids"]),
            tuple(float(v) for v in d["image_profile"]["probs"]),
        )


@dataclass(frozen=True)
class TaskInstance:
    query_id: int
    task_type: int
    instruction: TokenSequence
    query: TokenSequence
    positive_ids: tuple
    pool_id: str
    split: str = TRAIN

    @property
    def task(self) -> TaskType:
        return TASKS_BY_INDEX[self.task_type]

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "task_type": self.task_type,
            "instruction": self.instruction.to_dict(),
            "query": self.query.to_dict(),
            "positive_ids": list(self.positive_ids),
            "pool_id": self.pool_id,
            "split": self.split,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskInstance":
        return cls(
            int(d["query_id"]),
            int(d["task_type"]),
            TokenSequence.from_dict(d["instruction"]),
            TokenSequence.from_dict(d["query"]),
            tuple(int(v) for v in d["positive_ids"]),
            d["pool_id"],
            d["split"],
        )


@dataclass(frozen=True)
class RetrievalPool:
    pool_id: str
    candidates: tuple  # ((candidate_id, TokenSequence), ...)
    scope: str = LOCAL

    def __post_init__(self):
        ids = [cid for cid, _ in self.candidates]
        if len(set(ids)) != len(ids):
            raise ContractError(f"pool {self.pool_id}: duplicate candidate ids")

    def __len__(self):
        return len(self.candidates)

    @property
    def ids(self) -> list:
        return [cid for cid, _ in self.candidates]

    @property
    def sequences(self) -> list:
        return [seq for _, seq in self.candidates]


def merge_pools(pools: Iterable[RetrievalPool]) -> RetrievalPool:
    """Global pool: disjoint union of the local pools, ordered by candidate id."""
    merged = {}
    for pool in pools:
        for cid, seq in pool.candidates:
            if cid in merged:
                raise ContractError(f"candidate {cid} appears in more than one local pool")
            merged[cid] = seq
    return RetrievalPool("global", tuple(sorted(merged.items())), GLOBAL)


@dataclass
class Corpus:
    seed: int
    params: dict
    concepts: tuple
    tasks: tuple
    pools: tuple
    _by_id: dict = field(default=None, init=False, repr=False)

    def __iter__(self):
        # allows ``tasks, pools = corpus``
        yield self.tasks
        yield self.pools

    def split(self, name: str) -> list:
        return [t for t in self.tasks if t.split == name]

    @property
    def pools_by_id(self) -> dict:
        return {p.pool_id: p for p in self.pools}

    def global_pool(self) -> RetrievalPool:
        return merge_pools(self.pools)

    def candidate(self, cid: int) -> TokenSequence:
        if self._by_id is None:
            self._by_id = {c: s for p in self.pools for c, s in p.candidates}
        return self._by_id[cid]


# ---------------------------------------------------------------- sampling


def _rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def support_size(n_total: int) -> int:
    size = min(MAX_SUPPORT, (TEXT_RANGE[1] - TEXT_RANGE[0]) // n_total)
    size -= size % 2
    if size < 2:
        raise ContractError(f"{n_total} concepts do not fit the vocabulary")
    return size


def make_concepts(seed: int, n_total: int, d_latent: int = 8) -> tuple:
    rng = _rng(seed, 0)
    s = support_size(n_total)
    latents = rng.standard_normal((n_total, d_latent))
    latents /= np.linalg.norm(latents, axis=1, keepdims=True)
    text_perm = rng.permutation(np.arange(*TEXT_RANGE))
    image_perm = rng.permutation(np.arange(*IMAGE_RANGE))
    concepts = []
    for c in range(n_total):
        tp = rng.dirichlet(np.full(s, 2.0))
        ip = rng.dirichlet(np.full(s, 2.0))
        concepts.append(
            Concept(
                c,
                tuple(float(v) for v in latents[c]),
                tuple(int(v) for v in text_perm[c * s : (c + 1) * s]),
                tuple(float(v) for v in tp),
                tuple(int(v) for v in image_perm[c * s : (c + 1) * s]),
                tuple(float(v) for v in ip),
            )
        )
    return tuple(concepts)


class _Sampler:
    """Draws token content for a concept, with latent-neighbour noise."""

    def __init__(self, concepts: Sequence[Concept], noise: float, min_len: int, max_len: int):
        self.concepts = concepts
        self.noise = noise
        self.min_len = min_len
        self.max_len = max_len
        Z = np.array([c.latent for c in concepts])
        logits = NEIGHBOR_SHARPNESS * (Z @ Z.T)
        np.fill_diagonal(logits, -np.inf)
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        self.neighbors = w / w.sum(axis=1, keepdims=True)

    def tokens(self, rng, concept: Concept, modality: str, role: str, n: int) -> list:
        support, probs = concept.role_profile(modality, role)
        out = rng.choice(support, size=n, p=probs)
        if self.noise > 0:
            flips = np.flatnonzero(rng.random(n) < self.noise)
            for i in flips:
                j = rng.choice(len(self.concepts), p=self.neighbors[concept.id])
                s, p = self.concepts[j].profile(modality)
                out[i] = rng.choice(s, p=p)
        return [int(t) for t in out]

    def content(self, rng, concept: Concept, modalities: tuple, role: str) -> TokenSequence:
        toks, tags = [], []
        if len(modalities) == 1:
            lengths = [int(rng.integers(self.min_len, self.max_len + 1))]
        else:
            half_lo, half_hi = max(1, self.min_len // 2), max(1, self.max_len // 2)
            lengths = [int(rng.integers(half_lo, half_hi + 1)) for _ in modalities]
        for modality, n in zip(modalities, lengths):
            toks += self.tokens(rng, concept, modality, role, n)
            tags += [modality] * n
        return TokenSequence(tuple(toks), tuple(tags), None, concept.id)


def with_instruction(instr: TokenSequence, content: TokenSequence) -> TokenSequence:
    n = len(instr)
    return TokenSequence(
        instr.tokens + content.tokens,
        instr.modality_tags + content.modality_tags,
        (0, n),
        content.concept_id,
    )


def candidate_id(task_index: int, concept_id: int, pool_size: int) -> int:
    return (task_index - 1) * pool_size + concept_id


def generate_corpus(
    seed: int,
    n_concepts: int,
    n_queries_per_task: int,
    noise: float,
    *,
    pool_size: Optional[int] = None,
    test_fraction: float = 0.25,
    min_len: int = 8,
    max_len: int = 16,
    d_latent: int = 8,
) -> Corpus:
    """Build the eight-task corpus.  Deterministic in all arguments."""
    if n_concepts < 2:
        raise ContractError("n_concepts must be at least 2")
    if not 0.0 <= noise < 1.0:
        raise ContractError("noise must lie in [0, 1)")
    pool_size = n_concepts if pool_size is None else int(pool_size)
    if pool_size < n_concepts:
        raise ContractError("pool_size must be at least n_concepts")
    if not 8 <= min_len <= max_len <= 32:
        raise ContractError("sequence lengths must satisfy 8 <= min_len <= max_len <= 32")
    concepts = make_concepts(seed, pool_size, d_latent)
    sampler = _Sampler(concepts, noise, min_len, max_len)

    pools = []
    for task in TASK_TYPES:
        rng = _rng(seed, 1, task.index)
        cands = tuple(
            (candidate_id(task.index, c.id, pool_size), sampler.content(rng, c, task.candidate_modality, "candidate"))
            for c in concepts
        )
        pools.append(RetrievalPool(pool_name(task.index), cands, LOCAL))

    n_train = int(round(n_queries_per_task * (1.0 - test_fraction)))
    tasks = []
    for task in TASK_TYPES:
        rng = _rng(seed, 2, task.index)
        instr_ids = instruction_tokens(task.index)
        instr = TokenSequence(instr_ids, (TEXT,) * len(instr_ids), None, -1)
        for i in range(n_queries_per_task):
            c = concepts[int(rng.integers(n_concepts))]
            content = sampler.content(rng, c, task.query_modality, "query")
            tasks.append(
                TaskInstance(
                    query_id=(task.index - 1) * n_queries_per_task + i,
                    task_type=task.index,
                    instruction=instr,
                    query=with_instruction(instr, content),
                    positive_ids=(candidate_id(task.index, c.id, pool_size),),
                    pool_id=pool_name(task.index),
                    split=TRAIN if i < n_train else TEST,
                )
            )
    params = {
        "seed": seed,
        "n_concepts": n_concepts,
        "n_queries_per_task": n_queries_per_task,
        "noise": noise,
        "pool_size": pool_size,
        "test_fraction": test_fraction,
        "min_len": min_len,
        "max_len": max_len,
        "d_latent": d_latent,
    }
    return Corpus(seed, params, concepts, tuple(tasks), tuple(pools))


def _pairs(concepts, seed, stream, n_pairs, noise, min_len, max_len, positive_modality):
    sampler = _Sampler(concepts, noise, min_len, max_len)
    rng = _rng(seed, stream)
    out = []
    for _ in range(n_pairs):
        c = concepts[int(rng.integers(len(concepts)))]
        q = sampler.content(rng, c, (TEXT,), "query")
        p = sampler.content(rng, c, (positive_modality,), "candidate")
        out.append((q, p))
    return out


def build_text_pretrain_pairs(concepts, seed: int, n_pairs: int, noise: float = 0.1, min_len=8, max_len=16):
    """Text-only paraphrase pairs: both sides sampled from one concept's text profile."""
    return _pairs(concepts, seed, 3, n_pairs, noise, min_len, max_len, TEXT)


def build_text_image_pairs(concepts, seed: int, n_pairs: int, noise: float = 0.1, min_len=8, max_len=16):
    """Caption/image pairs: text query, image-token positive, same concept."""
    return _pairs(concepts, seed, 4, n_pairs, noise, min_len, max_len, IMAGE)


# ---------------------------------------------------------------- oracles


def token_owner_table(concepts: Sequence[Concept]) -> np.ndarray:
    owner = np.full(VOCAB_SIZE, -1, dtype=np.int64)
    for c in concepts:
        owner[list(c.text_support)] = c.id
        owner[list(c.image_support)] = c.id
    return owner


def owner_histogram(seq: TokenSequence, owner: np.ndarray, n_concepts: int) -> np.ndarray:
    """Bag of tokens projected onto the concept that owns each token id."""
    ids = owner[np.asarray(seq.tokens, dtype=np.int64)]
    ids = ids[ids >= 0]
    return np.bincount(ids, minlength=n_concepts).astype(np.float64)


def latent_estimate(seq: TokenSequence, owner: np.ndarray, concepts: Sequence[Concept]) -> np.ndarray:
    h = owner_histogram(seq, owner, len(concepts))
    Z = np.array([c.latent for c in concepts])
    v = h @ Z
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


# ---------------------------------------------------------------- serialization


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_corpus(corpus: Corpus, directory) -> list:
    """Write line-delimited records; returns the paths written."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    meta = d / "meta.json"
    meta.write_text(_dump({"format": "mmret-corpus", "version": 1, "params": corpus.params}) + "\n")
    paths.append(meta)
    with open(d / "concepts.jsonl", "w") as fh:
        for c in corpus.concepts:
            fh.write(_dump({"kind": "concept", **c.to_dict()}) + "\n")
    paths.append(d / "concepts.jsonl")
    with open(d / "tasks.jsonl", "w") as fh:
        for t in corpus.tasks:
            fh.write(_dump({"kind": "task", **t.to_dict()}) + "\n")
    paths.append(d / "tasks.jsonl")
    with open(d / "candidates.jsonl", "w") as fh:
        for p in corpus.pools:
            for cid, seq in p.candidates:
                fh.write(_dump({"kind": "candidate", "pool_id": p.pool_id, "candidate_id": cid, **seq.to_dict()}) + "\n")
    paths.append(d / "candidates.jsonl")
    return paths


def write_pairs(pairs, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for q, p in pairs:
            fh.write(_dump({"kind": "pair", "query": q.to_dict(), "positive": p.to_dict()}) + "\n")
    return path


def read_pairs(path) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            out.append((TokenSequence.from_dict(d["query"]), TokenSequence.from_dict(d["positive"])))
    return out


def read_corpus(directory) -> Corpus:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    params = meta["params"]
    with open(d / "concepts.jsonl") as fh:
        concepts = tuple(Concept.from_dict(json.loads(line)) for line in fh)
    with open(d / "tasks.jsonl") as fh:
        tasks = tuple(TaskInstance.from_dict(json.loads(line)) for line in fh)
    grouped: dict = {}
    with open(d / "candidates.jsonl") as fh:
        for line in fh:
            r = json.loads(line)
            grouped.setdefault(r["pool_id"], []).append((int(r["candidate_id"]), TokenSequence.from_dict(r)))
    pools = tuple(RetrievalPool(pid, tuple(c), LOCAL) for pid, c in grouped.items())
    return Corpus(int(params["seed"]), params, concepts, tasks, pools)
