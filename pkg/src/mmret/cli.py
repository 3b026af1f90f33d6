"""Command-line entry point: ``mmret <command> [--config ...]``.

Every command validates its arguments and the config before touching the
output directory, then refreshes ``manifest.json`` on success.  Failures print
one line ``error: category=<name> detail=<text>`` to stderr and exit with

    2  validation (bad config, unknown stage, missing artifact)
    3  runtime
    4  numeric (non-finite loss or gradient)
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from pathlib import Path
from typing import Optional

from mmret import pipeline as pl
from mmret import plotting
from mmret.ablation import GRIDS, grid_spec, run_ablation_grid
from mmret.config import PRESETS, RunConfig, load_config, with_overrides
from mmret.corpus import GLOBAL, LOCAL
from mmret.errors import ConfigError, ContractError, LengthError, NumericError, ShapeError
from mmret.evaluator import EvalReport
from mmret.trainer import HARD_NEG, RERANK_TRAIN, STAGES, Checkpoint

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_NUMERIC = 0, 2, 3, 4
SCOPES = (LOCAL, GLOBAL, "both")


class CliError(Exception):
    def __init__(self, category: str, detail: str, code: int):
        super().__init__(detail)
        self.category, self.detail, self.code = category, detail, code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("validation", message, EXIT_VALIDATION)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default="quickstart", help="YAML path or preset name (%s)" % ", ".join(PRESETS))
    p.add_argument("--seed", type=int, help="root seed override")
    p.add_argument("--out", help="output directory override")
    p.add_argument("--threads", type=int, help="worker cap; results do not depend on it")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mmret", description="Progressive multimodal retrieval training on synthetic corpora.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    _common(sub.add_parser("gen-data", help="generate the synthetic corpus and pretraining pairs"))

    p = sub.add_parser("train", help="train one stage from its predecessor checkpoint")
    _common(p)
    p.add_argument("--stage", required=True)

    p = sub.add_parser("mine", help="mine hard negatives with a frozen retriever")
    _common(p)
    p.add_argument("--stage", default=None, help="stage whose checkpoint mines (default: last retriever stage)")
    p.add_argument("--checkpoint", default=None)

    p = sub.add_parser("train-reranker", help="train the cross-encoder on mined negatives")
    _common(p)
    p.add_argument("--mining", default=None, help="mining file (default: mining/hard_neg.jsonl)")

    p = sub.add_parser("distill", help="distill the fused teacher into the retriever")
    _common(p)
    p.add_argument("--retriever", default=None)
    p.add_argument("--reranker", default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint, the rerank pipeline, or everything present")
    _common(p)
    p.add_argument("--scope", default=None)
    p.add_argument("--stage", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pipeline", action="store_true", help="recall-then-rerank with hard_neg + rerank_train")

    p = sub.add_parser("report", help="print the summary table and render figures")
    _common(p)

    p = sub.add_parser("ablate", help="run an ablation grid")
    _common(p)
    p.add_argument("--grid", required=True)

    p = sub.add_parser("run", help="the whole recipe: gen-data through eval")
    _common(p)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("show-config", help="print the resolved config as YAML")
    _common(p)
    return ap


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    return with_overrides(cfg, seed=args.seed, output_dir=args.out, threads=args.threads)


def _need_choice(value, choices, what):
    if value is not None and value not in choices:
        raise ConfigError(f"unknown {what} {value!r}; expected one of {', '.join(choices)}")


def _print_avgs(name: str, rep: EvalReport) -> None:
    parts = [f"model={name}"]
    for label, v in (("local_avg", rep.local_avg), ("global_avg", rep.global_avg)):
        if v is not None:
            parts.append(f"{label}={v:.6f}")
    print(" ".join(parts))


def summary_csv(summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "local_avg", "global_avg"])
    for name, rep in summary.items():
        w.writerow([name] + ["" if v is None else f"{100 * v:.6f}" for v in (rep.local_avg, rep.global_avg)])
    return buf.getvalue()


def load_summary(ws: pl.Workspace) -> dict:
    """Reports written by ``eval`` / ``run``, keyed by model name, in stage order."""
    order = ["untrained", *pl.RETRIEVER_STAGES, "pipeline"]
    found = {}
    for name in order:
        p = ws.reports / f"eval_{name}.json"
        if p.exists():
            found[name] = EvalReport.from_dict(json.loads(p.read_text()))
    return found


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg, ws, args) -> None:
    paths = pl.gen_data(cfg, ws)
    print(f"wrote {len(paths)} files under {ws.root}")


def cmd_train(cfg, ws, args) -> None:
    t0 = time.perf_counter()
    ck = pl.train_stage(cfg, ws, args.stage)
    print(f"stage={ck.stage} step={ck.step} tau={ck.temperature.effective:.6f} "
          f"seconds={time.perf_counter() - t0:.1f} checkpoint={ws.checkpoint(args.stage)}")


def cmd_mine(cfg, ws, args) -> None:
    stage = args.stage
    if stage is None and args.checkpoint is None:
        stage = HARD_NEG if ws.checkpoint(HARD_NEG).exists() else "instruction_tune"
    path = pl.mine(cfg, ws, stage, Path(args.checkpoint) if args.checkpoint else None)
    print(f"mining={path}")


def cmd_train_reranker(cfg, ws, args) -> None:
    ck = pl.train_reranker(cfg, ws, Path(args.mining) if args.mining else None)
    print(f"stage={ck.stage} step={ck.step} checkpoint={ws.checkpoint(RERANK_TRAIN)}")


def cmd_distill(cfg, ws, args) -> None:
    ck = pl.distill(cfg, ws, args.retriever and Path(args.retriever), args.reranker and Path(args.reranker))
    kl = json.loads((ws.reports / "distill_kl.json").read_text())
    print(f"stage={ck.stage} step={ck.step} kl_before={kl['kl_before']:.6f} kl_after={kl['kl_after']:.6f} "
          f"kl_ratio={kl['kl_ratio']:.6f}")


def cmd_eval(cfg, ws, args) -> None:
    if args.pipeline:
        rep = pl.evaluate_pipeline(cfg, ws, ws.load_checkpoint(HARD_NEG), ws.load_checkpoint(RERANK_TRAIN), args.scope)
        _print_avgs("pipeline", rep)
    elif args.checkpoint or args.stage:
        ck = Checkpoint.load(ws.require(Path(args.checkpoint), "checkpoint")) if args.checkpoint \
            else ws.load_checkpoint(args.stage)
        if ck.kind != "retriever":
            raise ContractError(f"{ck.stage} checkpoint is a {ck.kind}; use --pipeline to evaluate it")
        name = args.stage or ck.stage or "checkpoint"
        _print_avgs(name, pl.evaluate_checkpoint(cfg, ws, ck, name, args.scope))
    else:
        summary = pl.evaluate_all(cfg, ws, args.scope)
        for name, rep in summary.items():
            _print_avgs(name, rep)
    pl.write_summary(ws, load_summary(ws))


def cmd_report(cfg, ws, args) -> None:
    summary = load_summary(ws)
    if not summary:
        raise ContractError(f"no eval reports under {ws.reports} (run eval first)")
    sys.stdout.write(summary_csv(summary))
    for p in pl.render_figures(cfg, ws, summary):
        print(f"figure={p}")


def cmd_ablate(cfg, ws, args) -> None:
    spec = grid_spec(args.grid, cfg.ablation.build())
    grid = run_ablation_grid(spec, cfg.eval.seeds, cfg.ablation.build(), cfg.threads)
    out = ws.path("ablation")
    grid.write(out)
    plotting.ablation_bars(grid, out / f"{args.grid}.png")
    sys.stdout.write(grid.render())


def cmd_run(cfg, ws, args) -> None:
    t0 = time.perf_counter()
    summary = pl.run_all(cfg, ws, figures=not args.no_figures)
    for name, rep in summary.items():
        _print_avgs(name, rep)
    print(f"seconds={time.perf_counter() - t0:.1f} out={ws.root}")


def cmd_show_config(cfg, ws, args) -> None:
    sys.stdout.write(cfg.to_yaml())


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "mine": cmd_mine,
    "train-reranker": cmd_train_reranker,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "report": cmd_report,
    "ablate": cmd_ablate,
    "run": cmd_run,
    "show-config": cmd_show_config,
}
WRITES_NOTHING = ("show-config",)


def validate(cfg: RunConfig, args) -> None:
    """Argument checks that must pass before any file is written."""
    if args.command == "train":
        _need_choice(args.stage, STAGES, "stage")
        cfg.stage(args.stage)
    if args.command in ("mine", "eval"):
        _need_choice(args.stage, STAGES, "stage")
    if args.command == "eval":
        _need_choice(args.scope, SCOPES, "scope")
    if args.command == "ablate":
        _need_choice(args.grid, GRIDS, "grid")
        grid_spec(args.grid, cfg.ablation.build())
    if args.command == "distill":
        cfg.stage("distill")
    if args.command == "train-reranker":
        cfg.stage(RERANK_TRAIN)


def _classify(e: BaseException) -> CliError:
    if isinstance(e, CliError):
        return e
    if isinstance(e, NumericError):
        ids = f" batch_ids={e.batch_ids[:8]}" if e.batch_ids else ""
        return CliError("numeric", f"{e}{ids}", EXIT_NUMERIC)
    if isinstance(e, ConfigError):
        return CliError("validation", str(e), EXIT_VALIDATION)
    if isinstance(e, (ContractError, LengthError, ShapeError)):
        return CliError("contract", str(e), EXIT_VALIDATION)
    return CliError("runtime", f"{e.__class__.__name__}: {e}", EXIT_RUNTIME)


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CliError("validation", "missing command; see mmret --help", EXIT_VALIDATION)
        cfg = resolve_config(args)
        validate(cfg, args)
        ws = pl.Workspace(cfg.output_dir)
        COMMANDS[args.command](cfg, ws, args)
        if args.command not in WRITES_NOTHING:
            pl.write_manifest(cfg, ws)
        return EXIT_OK
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - every failure maps to one error line
        err = _classify(e)
        detail = " ".join(err.detail.split())
        print(f"error: category={err.category} detail={detail}", file=sys.stderr)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
