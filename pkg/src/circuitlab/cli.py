"""Command-line front door: ``circuitlab <subcommand> --config run.json [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline as pl
from .attribution import TooManyMembers, score_eap, score_eap_ig, score_exact
from .compare import LINKAGES, SimilarityMatrix
from .config import ConfigError
from .graph import GRANULARITIES

SUBCOMMANDS = ("run", "generate", "train", "score", "find", "faithfulness", "compare", "cluster",
               "baseline", "intersect", "report", "oracle")
EXIT_OK, EXIT_STAGE, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="circuitlab",
                                     description="Find and compare task circuits in toy transformers.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help=f"output directory (default ${pl.OUT_ENV} or ./{pl.DEFAULT_OUT})")
    common.add_argument("--threshold", type=float)
    common.add_argument("--method", choices=pl.METHODS)
    common.add_argument("--steps", type=int, help="EAP-IG interpolation steps")
    common.add_argument("--granularity", choices=GRANULARITIES)
    common.add_argument("--linkage", choices=LINKAGES)
    common.add_argument("--replicates", type=int, help="dummy circuits per task")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "run every stage and write a manifest",
        "generate": "write the configured toy tasks as JSONL plus a manifest",
        "train": "train the configured model and save a checkpoint",
        "score": "attribution scores for every task",
        "find": "minimal faithful circuit per task from saved scores",
        "faithfulness": "faithfulness reports for saved circuits",
        "compare": "similarity matrices over saved circuits",
        "cluster": "dendrogram of a saved similarity matrix",
        "baseline": "dummy-circuit and hypergeometric baselines",
        "intersect": "intersection circuit and structure profile",
        "report": "render SVGs for saved matrices, dendrograms and structure",
        "oracle": "compare EAP and EAP-IG with exact patching",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _overrides(args) -> dict:
    return {k: getattr(args, k) for k in ("seed", "out", "threshold", "method", "steps", "granularity",
                                          "linkage", "replicates")}


def _needs(command: str) -> tuple[bool, bool]:
    """(needs a model, needs tasks) for a subcommand."""
    if command in ("cluster", "report"):
        return False, False
    if command == "generate":
        return False, True
    return True, True


def _run_stage(command: str, cfg: pl.RunConfig, ws: pl.Workspace) -> None:
    if command == "cluster":
        doc = ws.read_json(f"matrices/{cfg.granularity}/{cfg.cluster_metric}.json")
        pl.stage_cluster(cfg, ws, SimilarityMatrix.from_json(doc))
        return
    if command == "report":
        pl.stage_report(cfg, ws)
        return
    tasks = pl.stage_tasks(cfg, ws)
    if command == "generate":
        return
    model = pl.stage_model(cfg, ws, tasks, retrain=(command == "train"))
    if command == "train":
        pl.stage_evaluate(cfg, ws, model, tasks)
    elif command == "score":
        pl.stage_score(cfg, ws, model, tasks)
    elif command == "find":
        pl.stage_find(cfg, ws, model, tasks, pl.load_scores(cfg, ws, tasks))
    elif command == "faithfulness":
        pl.stage_faithfulness(cfg, ws, model, tasks, pl.load_circuits(cfg, ws, tasks))
    elif command == "compare":
        pl.stage_compare(cfg, ws, tasks, pl.load_circuits(cfg, ws, tasks), model)
    elif command == "baseline":
        pl.stage_baseline(cfg, ws, model, pl.load_circuits(cfg, ws, tasks))
    elif command == "intersect":
        pl.stage_intersect(cfg, ws, model, pl.load_circuits(cfg, ws, tasks))
    elif command == "oracle":
        for t in tasks:
            exact = score_exact(model, t, cfg.granularity, path="delta").values
            doc = {"task": t.task_id, "granularity": cfg.granularity, "steps": cfg.steps,
                   "mean_abs_error_eap": float(abs(score_eap(model, t, cfg.granularity).values - exact).mean()),
                   "mean_abs_error_eap_ig": float(abs(score_eap_ig(model, t, cfg.granularity, cfg.steps).values
                                                      - exact).mean())}
            ws.write_json(f"oracle/{cfg.granularity}/{t.task_id}.json", doc, "oracle")
            print(json.dumps(doc, sort_keys=True))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = pl.load_config(args.config, _overrides(args))
        if args.command != "run":
            cfg.validate(*_needs(args.command))
    except ConfigError as err:
        print(json.dumps({"status": "config-error", "message": str(err)}), file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "run":
        status, ws = pl.run_pipeline(cfg)
        doc = json.loads(ws.path("manifest.json").read_text())
        if status:
            print(json.dumps({"status": doc["status"], **(doc["error"] or {})}), file=sys.stderr)
        else:
            print(ws.path("manifest.json"))
        return status

    ws = pl.Workspace(Path(cfg.out))
    try:
        _run_stage(args.command, cfg, ws)
    except (pl.StageError, TooManyMembers, ValueError, OSError) as err:
        pl.write_manifest(cfg, ws, "stage-error",
                          {"stage": getattr(err, "stage", args.command), "type": type(err).__name__,
                           "message": str(err)}, merge=True)
        print(json.dumps({"status": "stage-error", "stage": args.command, "message": str(err)}),
              file=sys.stderr)
        return EXIT_STAGE
    pl.write_manifest(cfg, ws, merge=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
