"""Command-line entry point: ``arralab <subcommand> [options]``.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 numerical
abort, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from arralab import pipeline
from arralab.errors import ArraError
from arralab.numerics import set_deterministic

log = logging.getLogger("arralab")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="JSON pipeline config (merged onto defaults)")
    p.add_argument("--workspace", type=Path, default=Path("workspace"), help="artifact root")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--deterministic", action="store_true", help="single-threaded deterministic kernels")
    p.add_argument("--parallel", type=int, default=1, help="worker processes for independent cells")
    p.add_argument("--force", action="store_true", help="rebuild even if the artifact exists")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="arralab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("show-config", parents=[common], help="print the materialized config")
    sub.add_parser("gen-data", parents=[common], help="render train / held-out / source splits")
    sub.add_parser("train-tokenizer", parents=[common], help="train the VQ image tokenizer")
    p = sub.add_parser("train-encoder", parents=[common], help="pretrain a foundation encoder")
    p.add_argument("--kind", choices=("cross_modal", "vision_only", "all"), default="all")
    p = sub.add_parser("pretrain-lm", parents=[common], help="pretrain an init checkpoint")
    p.add_argument("--mode", choices=("text_only", "t2i"), required=True)
    p = sub.add_parser("train", parents=[common], help="train the generator")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, help="also save checkpoint_<step>.arrc")
    p = sub.add_parser("sample", parents=[common], help="generate images for prompts")
    p.add_argument("--prompt", action="append", default=[], help="caption (repeatable)")
    p.add_argument("--prompts-file", type=Path, help="one caption per line")
    p.add_argument("--out", type=Path, default=Path("samples"))
    p.add_argument("--checkpoint", type=Path, help="defaults to the configured run")
    p.add_argument("--cfg-scale", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--sample-seed", type=int)
    p.add_argument("--scale", type=int, default=4, help="nearest-neighbor upscale of the PNGs")
    p = sub.add_parser("eval", parents=[common], help="score generations on held-out captions")
    p.add_argument("--checkpoint", type=Path)
    p = sub.add_parser("ablate", parents=[common], help="run an ablation grid")
    p.add_argument("grid", type=Path)
    p.add_argument("--seeds", type=int, nargs="+", help="override the grid's seeds")
    p.add_argument("--dry-run", action="store_true", help="validate and report grid size only")
    p = sub.add_parser("report", parents=[common], help="summarize trained runs")
    p.add_argument("manifest_dir", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def _config(args) -> pipeline.PipelineConfig:
    overrides = {"train": {"seed": args.seed}} if args.seed is not None else None
    sample = {}
    for flag, key in (
        ("cfg_scale", "cfg_scale"),
        ("temperature", "temperature"),
        ("top_k", "top_k"),
        ("sample_seed", "seed"),
    ):
        if getattr(args, flag, None) is not None:
            sample[key] = getattr(args, flag)
    if getattr(args, "greedy", False):
        sample["greedy"] = True
    if sample:
        overrides = {**(overrides or {}), "sample": sample}
    return pipeline.load_config(args.config, overrides)


def _progress(rec: dict) -> None:
    if rec.get("kind") == "eval":
        log.info("step %d held-out cos %s", rec["step"], rec["eval_cos"])
    elif rec["step"] % 100 == 0:
        log.info("step %d L_AR %.4f L_GVA %s", rec["step"], rec["L_AR"], rec["L_GVA"])


def run(args) -> object:
    if args.deterministic:
        set_deterministic(True)
    if args.command == "report":
        return pipeline.report(args.manifest_dir, args.out)
    if args.command == "ablate":
        grid = pipeline.AblationGrid.load(args.grid)
        if args.seeds:
            grid.seeds = list(args.seeds)
        if args.dry_run:
            cells = pipeline.expand_grid(grid, args.config)
            return {"runs": len(cells), "cells": [c for c, _ in cells]}
        rows, out = pipeline.ablate(
            args.workspace, grid, args.config, args.parallel, args.deterministic
        )
        failed = sum(r["status"] != "ok" for r in rows)
        return {"rows": len(rows), "failed": failed, "csv": str(out / "results.csv")}

    cfg = _config(args)
    ws = pipeline.Workspace(args.workspace, cfg)
    if args.command == "show-config":
        return cfg.to_dict()
    if args.command == "gen-data":
        return str(pipeline.gen_data(ws, args.force))
    if args.command == "train-tokenizer":
        return str(pipeline.train_tokenizer(ws, args.force))
    if args.command == "train-encoder":
        kinds = ("cross_modal", "vision_only") if args.kind == "all" else (args.kind,)
        return [str(pipeline.train_encoder(ws, k, args.force)) for k in kinds]
    if args.command == "pretrain-lm":
        return str(pipeline.pretrain_lm(ws, args.mode, args.force))
    if args.command == "train":
        return str(
            pipeline.train(ws, args.force, args.resume, args.checkpoint_every, progress=_progress)
        )
    if args.command == "sample":
        prompts = list(args.prompt)
        if args.prompts_file:
            prompts += [l.strip() for l in args.prompts_file.read_text().splitlines() if l.strip()]
        if not prompts:
            raise pipeline.ConfigError("sample needs --prompt or --prompts-file")
        return [str(p) for p in pipeline.sample(ws, prompts, args.out, args.checkpoint, args.scale)]
    if args.command == "eval":
        return pipeline.evaluate(ws, args.checkpoint, args.force)
    raise pipeline.ConfigError(f"unknown command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(message)s",
    )
    try:
        result = run(args)
    except ArraError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
