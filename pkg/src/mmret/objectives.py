"""Contrastive, rerank and distillation losses, and linear score fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mmret.errors import ContractError, ShapeError
from mmret.tensor import Parameter, Tape, TensorNode, as_node, constant, ops

TAU_MIN = 1e-3
TAU_MAX = 1.0
LOG_TAU_MIN = math.log(TAU_MIN)
LOG_TAU_MAX = math.log(TAU_MAX)

UNI = "uni"
BI = "bi"


@dataclass
class Temperature:
    """Softmax temperature, fixed or learnable.

    A learnable temperature is stored as ``log tau`` in a trainable scalar
    parameter.  The effective value is clamped to ``[TAU_MIN, TAU_MAX]``.
    """

    mode: str = "fixed"
    value: float = 0.05
    param: Optional[Parameter] = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in ("fixed", "learnable"):
            raise ContractError(f"unknown temperature mode {self.mode!r}")
        if not self.value > 0:
            raise ContractError("temperature must be positive")
        if self.mode == "learnable" and self.param is None:
            log_tau = np.clip(math.log(self.value), LOG_TAU_MIN, LOG_TAU_MAX)
            self.param = Parameter("log_tau", np.array(log_tau, dtype=np.float32))

    @classmethod
    def learnable(cls, init: float) -> "Temperature":
        return cls("learnable", init)

    @property
    def effective(self) -> float:
        if self.mode == "fixed":
            return float(min(max(self.value, TAU_MIN), TAU_MAX))
        return float(np.exp(np.clip(np.float64(self.param.data), LOG_TAU_MIN, LOG_TAU_MAX)))

    def inverse_node(self, tape: Optional[Tape] = None) -> TensorNode:
        """``1 / tau`` as a scalar node; tracked when learnable and a tape is given."""
        if self.mode == "fixed" or tape is None:
            return constant(1.0 / self.effective)
        log_tau = ops.clip(tape.watch(self.param), LOG_TAU_MIN, LOG_TAU_MAX)
        return ops.exp(ops.neg(log_tau))

    def project(self):
        """Clamp the stored log-parameter back into range after an update."""
        if self.param is not None:
            np.clip(self.param.data, LOG_TAU_MIN, LOG_TAU_MAX, out=self.param.data)


@dataclass
class SimilarityMatrix:
    sims: TensorNode
    positive_index: np.ndarray

    def __post_init__(self):
        self.sims = as_node(self.sims)
        self.positive_index = np.asarray(self.positive_index, dtype=np.int64)
        if self.sims.data.ndim != 2:
            raise ShapeError(f"similarity matrix must be rank-2, got {self.sims.shape}")
        rows, cols = self.sims.shape
        if rows == 0 or cols == 0:
            raise ContractError("similarity matrix needs at least one row and one candidate")
        if self.positive_index.shape != (rows,):
            raise ContractError("positive_index needs one entry per row")
        if self.positive_index.min() < 0 or self.positive_index.max() >= cols:
            raise ContractError("positive_index out of bounds")


def similarity(queries: TensorNode, candidates: TensorNode) -> TensorNode:
    """Cosine similarity of unit-norm rows: ``Q @ C^T``."""
    return ops.matmul(queries, ops.transpose(candidates))


def _row_loss(logits, targets, mask=None):
    return ops.mean(ops.softmax_cross_entropy(logits, targets, mask))


def _column_loss(logits, positive_index):
    # c -> q direction over the columns that are some row's positive
    cols = np.unique(positive_index)
    first_row = {int(c): int(np.flatnonzero(positive_index == c)[0]) for c in cols}
    lt = ops.transpose(logits)
    if len(cols) != lt.shape[0]:
        lt = ops.take(lt, cols)
    return _row_loss(lt, np.array([first_row[int(c)] for c in cols]))


def info_nce(sim: SimilarityMatrix, temp: Temperature, direction: str = UNI, tape: Optional[Tape] = None) -> TensorNode:
    """Mean InfoNCE over rows; ``bi`` averages the row and column directions."""
    logits = ops.scale(sim.sims, temp.inverse_node(tape if tape is not None else sim.sims.tape))
    rows = _row_loss(logits, sim.positive_index)
    if direction == UNI:
        return rows
    if direction != BI:
        raise ContractError(f"unknown direction {direction!r}")
    return ops.scale(ops.add(rows, _column_loss(logits, sim.positive_index)), 0.5)


@dataclass
class HardNegativeSims:
    """Per-row similarities to mined hard negatives, padded to ``(rows, K)``."""

    sims: Optional[TensorNode]
    mask: np.ndarray
    candidate_ids: np.ndarray
    positive_ids: Sequence

    @property
    def empty(self) -> bool:
        return self.sims is None or not np.any(self.mask)


def info_nce_with_hard_negs(sim_in_batch: SimilarityMatrix, hard: HardNegativeSims, temp: Temperature,
                            direction: str = UNI, include_in_batch: bool = True,
                            tape: Optional[Tape] = None) -> TensorNode:
    """InfoNCE whose row denominators also include that row's mined hard negatives.

    With ``include_in_batch=False`` each row only sees its positive and its
    hard negatives.
    """
    if hard.empty and include_in_batch:
        return info_nce(sim_in_batch, temp, direction, tape)
    for r, pos in enumerate(hard.positive_ids):
        pos_set = set(pos) if isinstance(pos, (set, frozenset, tuple, list)) else {pos}
        bad = [int(c) for c, m in zip(hard.candidate_ids[r], hard.mask[r]) if m and int(c) in pos_set]
        if bad:
            raise ContractError(f"row {r}: hard negative {bad[0]} is the positive")
    tape = tape if tape is not None else sim_in_batch.sims.tape
    inv = temp.inverse_node(tape)
    logits = ops.scale(sim_in_batch.sims, inv)
    R, C = logits.shape
    if include_in_batch:
        base_mask = np.ones((R, C), dtype=bool)
        targets = sim_in_batch.positive_index
        full = logits
    else:
        pos_logit = ops.take(ops.reshape(logits, (R * C,)), np.arange(R) * C + sim_in_batch.positive_index)
        full = ops.reshape(pos_logit, (R, 1))
        base_mask = np.ones((R, 1), dtype=bool)
        targets = np.zeros(R, dtype=np.int64)
    if hard.empty:
        rows = _row_loss(full, targets, base_mask)
    else:
        full = ops.concat([full, ops.scale(hard.sims, inv)], axis=1)
        rows = _row_loss(full, targets, np.concatenate([base_mask, hard.mask], axis=1))
    if direction == UNI:
        return rows
    return ops.scale(ops.add(rows, _column_loss(logits, sim_in_batch.positive_index)), 0.5)


YES = "yes"
NO = "no"


def rerank_nll(logit, label) -> TensorNode:
    """``-log sigma(z)`` for yes, ``-log(1 - sigma(z))`` for no (elementwise)."""
    z = as_node(logit)
    labels = np.asarray(label)
    if labels.ndim == 0:
        labels = np.full(z.shape, labels.item())
    if labels.shape != z.shape:
        raise ShapeError(f"rerank_nll: labels {labels.shape} vs logits {z.shape}")
    is_yes = np.isin(labels, [YES, True, 1])
    sign = np.where(is_yes, -1.0, 1.0).astype(z.data.dtype)
    # softplus(-z) = -log sigma(z); softplus(z) = -log(1 - sigma(z))
    return ops.softplus(ops.mul(z, as_node(sign)))


def yes_probability(logit) -> np.ndarray:
    return ops.sigmoid(as_node(logit)).data


@dataclass
class FusedScoreSet:
    query_id: int
    candidate_ids: list
    s_recall: list
    s_rerank: list
    alpha: float
    s_multi: list

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "candidate_ids": list(self.candidate_ids),
            "s_recall": list(self.s_recall),
            "s_rerank": list(self.s_rerank),
            "alpha": self.alpha,
            "s_multi": list(self.s_multi),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FusedScoreSet":
        return cls(int(d["query_id"]), [int(c) for c in d["candidate_ids"]], list(d["s_recall"]),
                   list(d["s_rerank"]), float(d["alpha"]), list(d["s_multi"]))


def fuse_scores(s_recall: Sequence[float], s_rerank: Sequence[float], alpha: float,
                query_id: int = -1, candidate_ids: Optional[Sequence[int]] = None) -> FusedScoreSet:
    """``alpha * s_recall + (1 - alpha) * s_rerank``; no normalisation here."""
    if len(s_recall) != len(s_rerank):
        raise ContractError(f"fuse_scores: {len(s_recall)} recall scores vs {len(s_rerank)} rerank scores")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError("alpha must lie in [0, 1]")
    if candidate_ids is None:
        candidate_ids = list(range(len(s_recall)))
    elif len(candidate_ids) != len(s_recall):
        raise ContractError("candidate_ids length mismatch")
    r = [float(v) for v in s_recall]
    k = [float(v) for v in s_rerank]
    multi = [alpha * a + (1.0 - alpha) * b for a, b in zip(r, k)]
    return FusedScoreSet(query_id, list(candidate_ids), r, k, float(alpha), multi)


def teacher_distribution(teacher: FusedScoreSet, teacher_temp: float = 1.0) -> np.ndarray:
    z = np.asarray(teacher.s_multi, dtype=np.float64) / teacher_temp
    e = np.exp(z - z.max())
    return e / e.sum()


def distill_kl(teachers, student_sims, student_temp: Temperature, teacher_temp: float = 1.0,
               candidate_ids=None, tape: Optional[Tape] = None) -> TensorNode:
    """Mean over queries of ``KL(P_teacher || Q_student)``.

    ``teachers`` is one :class:`FusedScoreSet` (with ``student_sims`` of shape
    ``(C,)``) or a list of them (with ``(N, Cmax)`` sims, rows padded on the
    right).  ``candidate_ids`` lists the student's candidates per query and
    must match the teacher's exactly.  The teacher side is a constant.
    """
    single = isinstance(teachers, FusedScoreSet)
    teachers = [teachers] if single else list(teachers)
    sims = as_node(student_sims)
    if single:
        sims = ops.reshape(sims, (1, sims.size))
        if candidate_ids is not None:
            candidate_ids = [candidate_ids]
    n, cmax = sims.shape
    if n != len(teachers):
        raise ContractError(f"distill_kl: {len(teachers)} teachers for {n} student rows")
    P = np.zeros((n, cmax))
    mask = np.zeros((n, cmax), dtype=bool)
    for i, t in enumerate(teachers):
        c = len(t.candidate_ids)
        if c > cmax:
            raise ContractError(f"query {t.query_id}: teacher has more candidates than the student row")
        if candidate_ids is not None and list(candidate_ids[i]) != list(t.candidate_ids):
            raise ContractError(f"query {t.query_id}: teacher and student candidate lists differ")
        P[i, :c] = teacher_distribution(t, teacher_temp)
        mask[i, :c] = True
    if tape is None:
        tape = sims.tape
    logits = ops.scale(sims, student_temp.inverse_node(tape))
    return ops.mean(ops.kl_to_target(logits, P, mask))
