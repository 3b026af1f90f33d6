"""Ablation grids: small controlled experiments over one axis at a time.

Every cell of a grid trains from the same seeded initialisation on the same
data; only the varied axis differs.  Directional flags record whether the
expected ordering held per seed; they are observations, not assertions.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from mmret.corpus import TRAIN, Corpus, generate_corpus
from mmret.encoder import MASKED_MEAN, MEAN, EncoderConfig, readout_configs
from mmret.errors import ConfigError
from mmret.evaluator import evaluate
from mmret.miner import ABSOLUTE, MiningConfig, mine_corpus
from mmret.trainer import (
    HARD_NEG,
    INSTRUCTION_TUNE,
    Checkpoint,
    StageConfig,
    TemperatureSpec,
    fingerprint,
    run_hard_neg_stage,
    run_stage,
    scale_lr,
    task_items,
)

GRIDS = ("readout", "masking", "batch_temp", "hard_negatives")


@dataclass(frozen=True)
class AblationSettings:
    """The small fixture and training budget shared by every cell."""

    n_concepts: int = 16
    n_queries_per_task: int = 24
    noise: float = 0.2
    pool_size: int = 48
    d_model: int = 32
    n_layers: int = 1
    n_heads: int = 2
    batch_size: int = 32
    lr: float = 2e-3
    epochs: int = 2
    temperature: float = 0.05
    mining_k: int = 4

    def corpus(self, seed: int) -> Corpus:
        return generate_corpus(seed, self.n_concepts, self.n_queries_per_task, self.noise, pool_size=self.pool_size)

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads, max_len=48)


@dataclass(frozen=True)
class Cell:
    name: str
    label: str
    encoder: EncoderConfig
    stage: StageConfig
    strip_instructions: bool = False
    mining: Optional[MiningConfig] = None  # hard-neg continuation on top of the base cell
    continue_from_base: bool = False


@dataclass(frozen=True)
class GridSpec:
    name: str
    cells: tuple
    flags: tuple  # ((flag name, better cell, worse cell), ...)


@dataclass
class AblationGrid:
    spec: GridSpec
    seeds: list
    cells: dict = field(default_factory=dict)  # seed -> cell name -> EvalReport
    flags: dict = field(default_factory=dict)  # seed -> flag name -> bool

    def to_dict(self) -> dict:
        return {
            "grid": self.spec.name,
            "seeds": self.seeds,
            "cells": {str(s): {c: r.to_dict() for c, r in cells.items()} for s, cells in self.cells.items()},
            "flags": {str(s): f for s, f in self.flags.items()},
            "labels": {c.name: c.label for c in self.spec.cells},
        }

    def render(self) -> str:
        """Plain-text table: one row per cell, local/global averages per seed."""
        lines = [f"{self.spec.name}"]
        head = ["ID", "setting"] + [f"seed {s} local/global" for s in self.seeds]
        rows = []
        for c in self.spec.cells:
            row = [c.name, c.label]
            for s in self.seeds:
                r = self.cells[s][c.name]
                row.append(f"{100 * r.local_avg:.2f} / {100 * r.global_avg:.2f}")
            rows.append(row)
        widths = [max(len(str(x)) for x in col) for col in zip(head, *rows)]
        fmt = "  ".join("{:<%d}" % w for w in widths)
        lines.append(fmt.format(*head))
        lines.extend(fmt.format(*r) for r in rows)
        for s in self.seeds:
            marks = ", ".join(f"{k}={'yes' if v else 'no'}" for k, v in self.flags[s].items())
            lines.append(f"seed {s} flags: {marks}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["grid", "seed", "cell", "setting", "local_avg", "global_avg"])
        for s in self.seeds:
            for c in self.spec.cells:
                r = self.cells[s][c.name]
                w.writerow([self.spec.name, s, c.name, c.label, f"{100 * r.local_avg:.6f}", f"{100 * r.global_avg:.6f}"])
        return buf.getvalue()

    def write(self, directory) -> list:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = [d / f"{self.spec.name}.json", d / f"{self.spec.name}.csv", d / f"{self.spec.name}.txt"]
        paths[0].write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        paths[1].write_text(self.to_csv())
        paths[2].write_text(self.render())
        return paths


def _stage(s: AblationSettings, **kw) -> StageConfig:
    base = dict(batch_size=s.batch_size, lr=s.lr, epochs=s.epochs,
                temperature=TemperatureSpec("fixed", s.temperature))
    base.update(kw)
    return StageConfig(INSTRUCTION_TUNE, **base)


def grid_spec(name: str, s: AblationSettings = AblationSettings()) -> GridSpec:
    """Build (and thereby validate) every cell of a named grid."""
    enc = s.encoder()
    if name == "readout":
        cfgs = readout_configs(enc)
        labels = {
            "ID-0": "causal, last token, compression suffix",
            "ID-1": "bidirectional, last token, compression suffix",
            "ID-2": "causal, mean, compression suffix",
            "ID-3": "bidirectional, mean, compression suffix",
            "ID-4": "bidirectional, mean",
        }
        cells = tuple(Cell(k, labels[k], cfgs[k], _stage(s)) for k in sorted(cfgs))
        return GridSpec(name, cells, (("ID-4>=ID-0", "ID-4", "ID-0"),))
    if name == "masking":
        cells = (
            Cell("ID-0", "instructions, masked pooling", enc.replace(pooling_mode=MASKED_MEAN), _stage(s)),
            Cell("ID-1", "instructions, unmasked pooling", enc.replace(pooling_mode=MEAN), _stage(s)),
            Cell("ID-2", "no instructions", enc.replace(pooling_mode=MEAN), _stage(s), strip_instructions=True),
        )
        return GridSpec(name, cells, (("masked>=unmasked", "ID-0", "ID-1"), ("ID-0>=ID-2", "ID-0", "ID-2")))
    if name == "batch_temp":
        b, big = s.batch_size // 4 or 1, s.batch_size
        scaled = scale_lr(s.lr / 2, b, big)
        fixed = TemperatureSpec("fixed", s.temperature)
        learn = TemperatureSpec("learnable", s.temperature)
        cells = (
            Cell("ID-0", f"batch {b}, fixed tau, lr {s.lr / 2:g}", enc, _stage(s, batch_size=b, lr=s.lr / 2, epochs=1, temperature=fixed)),
            Cell("ID-1", f"batch {big}, fixed tau, lr {s.lr / 2:g}", enc, _stage(s, batch_size=big, lr=s.lr / 2, epochs=1, temperature=fixed)),
            Cell("ID-2", f"batch {big}, fixed tau, lr {scaled:g}", enc, _stage(s, batch_size=big, lr=scaled, epochs=1, temperature=fixed)),
            Cell("ID-3", f"batch {big}, learnable tau, lr {scaled:g}", enc, _stage(s, batch_size=big, lr=scaled, epochs=1, temperature=learn)),
        )
        return GridSpec(name, cells, (("sqrt-lr>=same-lr", "ID-2", "ID-1"), ("learnable>=fixed", "ID-3", "ID-2")))
    if name == "hard_negatives":
        hn = StageConfig(HARD_NEG, s.batch_size, s.lr / 2, s.epochs, TemperatureSpec("learnable", None),
                         hard_negatives_per_query=s.mining_k)
        unfiltered = MiningConfig(s.mining_k, ABSOLUTE, 1.0)
        filtered = MiningConfig(s.mining_k, ABSOLUTE, 0.9)
        cells = (
            Cell("base", "in-batch negatives only", enc, _stage(s)),
            Cell("ID-0", "only top-k hard negatives", enc, replace(hn, include_in_batch=False), mining=unfiltered,
                 continue_from_base=True),
            Cell("ID-1", "in-batch + top-k hard negatives", enc, hn, mining=unfiltered, continue_from_base=True),
            Cell("ID-2", "in-batch + filtered top-k hard negatives", enc, hn, mining=filtered, continue_from_base=True),
        )
        return GridSpec(name, cells, (("filtered>=unfiltered", "ID-2", "ID-1"), ("filtered>=base", "ID-2", "base")))
    raise ConfigError(f"unknown grid {name!r}; expected one of {', '.join(GRIDS)}")


def _strip(tasks) -> list:
    return [replace(t, query=t.query.without_instruction()) for t in tasks]


def run_cell(cell: Cell, corpus: Corpus, seed: int, base: Optional[Checkpoint] = None, threads: int = 1):
    """Train one cell and evaluate it in both scopes; returns (checkpoint, report)."""
    tasks = list(corpus.tasks)
    if cell.strip_instructions:
        tasks = _strip(tasks)
    if cell.continue_from_base:
        train = [t for t in tasks if t.split == TRAIN]
        mining = mine_corpus(base.retriever(threads), train, corpus.pools, cell.mining, threads)
        stage = replace(cell.stage, seed=seed)
        ck = run_hard_neg_stage(stage, base, task_items(tasks, corpus.candidate), mining, corpus.candidate)
    else:
        stage = replace(cell.stage, seed=seed)
        ck = run_stage(stage, Checkpoint.fresh(cell.encoder, seed), task_items(tasks, corpus.candidate))
    fp = fingerprint({"cell": cell.name, "stage": stage.to_dict(), "encoder": cell.encoder.to_dict()})
    rep = evaluate(ck.retriever(threads), tasks, corpus.pools, "both", threads=threads, fingerprint=fp, seed=seed)
    return ck, rep


def run_ablation_grid(spec: GridSpec, seeds, settings: AblationSettings = AblationSettings(), threads: int = 1,
                      corpus_seed: Optional[int] = None) -> AblationGrid:
    """Train and evaluate every cell for every seed.

    The corpus is generated from ``corpus_seed`` (default: each run seed), so
    all cells of a seed see identical data.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("an ablation grid needs at least one seed")
    grid = AblationGrid(spec, seeds)
    for seed in seeds:
        corpus = settings.corpus(seed if corpus_seed is None else corpus_seed)
        reports, base_ck = {}, None
        for cell in spec.cells:
            if cell.continue_from_base:
                if base_ck is None:
                    raise ConfigError(f"cell {cell.name} continues from a base cell that precedes it")
                _, reports[cell.name] = run_cell(cell, corpus, seed, base_ck, threads)
            else:
                ck, reports[cell.name] = run_cell(cell, corpus, seed, threads=threads)
                base_ck = ck
        grid.cells[seed] = reports
        grid.flags[seed] = {
            flag: reports[a].local_avg >= reports[b].local_avg for flag, a, b in spec.flags
        }
    return grid

