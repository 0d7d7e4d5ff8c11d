"""Staged experiment pipeline: train, score, find, compare, cluster, baseline, report.

Every stage reads and writes artifacts in one output directory, so stages can
run alone once their inputs exist.  ``run_pipeline`` chains them and writes a
manifest indexing every artifact with its sha256.  Apart from the manifest's
timestamp, outputs are a pure function of the config.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import schemas
from .attribution import ScoreTable, score
from .circuits import CircuitEvaluator, SearchParams, find_minimal_circuit
from .compare import METRICS, LINKAGES, Dendrogram, SimilarityMatrix, cluster, similarity_matrix
from .config import ConfigError, ModelConfig
from .graph import GRANULARITIES, Circuit, circuit_from_json, circuit_to_json
from .model import Model, load_checkpoint, save_checkpoint
from .render import render_dendrogram, render_matrix, render_structure
from .stats import baseline_report, intersect_and_profile
from .tasks import (DEFAULT_FAMILY, KINDS, TaskError, TaskSpec, eval_accuracy, eval_metric,
                    generate_task, load_manifest, save_manifest)
from .training import train

log = logging.getLogger(__name__)

OUT_ENV = "CIRCUITLAB_OUT"
DEFAULT_OUT = "circuitlab-out"
METHODS = ("eap", "eap-ig")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class TrainRecipe:
    config: ModelConfig
    steps: int = 2000
    lr: float = 3e-3
    batch_size: int = 64


@dataclass(frozen=True)
class RunConfig:
    """A complete experiment description; paths are resolved at load time."""

    out: Path
    checkpoint: Path | None = None
    recipe: TrainRecipe | None = None
    task_manifest: Path | None = None
    generate: tuple[dict, ...] = ()
    method: str = "eap-ig"
    steps: int = 5
    granularity: str = "edge"
    threshold: float = 0.85
    metrics: tuple[str, ...] = METRICS
    cluster_metric: str = "iou"
    linkage: str = "average"
    replicates: int = 20
    seed: int = 0
    qkv_split: bool = True

    def validate(self, need_model: bool = True, need_tasks: bool = True) -> None:
        if need_model and self.checkpoint is None and self.recipe is None:
            raise ConfigError("config needs model.checkpoint or a model training recipe")
        if need_model and self.checkpoint is not None and not self.checkpoint.exists():
            raise ConfigError(f"checkpoint {self.checkpoint} does not exist")
        if need_tasks:
            if self.task_manifest is None and not self.generate:
                raise ConfigError("config needs tasks.manifest or tasks.generate")
            if self.task_manifest is not None:
                if not self.task_manifest.exists():
                    raise ConfigError(f"task manifest {self.task_manifest} does not exist")
                try:
                    entries = json.loads(self.task_manifest.read_text())["tasks"]
                except (ValueError, KeyError) as err:
                    raise ConfigError(f"unreadable task manifest {self.task_manifest}: {err}") from err
                for e in entries:
                    path = self.task_manifest.parent / e["path"]
                    if not path.exists():
                        raise ConfigError(f"task file {path} does not exist")
            for g in self.generate:
                if g.get("kind") not in KINDS:
                    raise ConfigError(f"unknown task kind {g.get('kind')!r}")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if not 0.0 < self.threshold <= 1.0:
            raise ConfigError("threshold must lie in (0, 1]")
        if not set(self.metrics) <= set(METRICS):
            raise ConfigError(f"metrics must be drawn from {METRICS}")
        if self.cluster_metric not in self.metrics:
            raise ConfigError("cluster_metric must be one of the computed metrics")
        if self.linkage not in LINKAGES:
            raise ConfigError(f"linkage must be one of {LINKAGES}")
        if self.replicates < 0:
            raise ConfigError("replicates must be non-negative")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read a JSON config and apply flag overrides (None values are ignored).

    Layout::

        {"model": {"checkpoint": "m.ckpt"} | {"config": {...}, "steps": 2000, "lr": 0.003},
         "tasks": {"manifest": "tasks/manifest.json"} | {"generate": [{"kind": ..., "size": ..., "seed": ...}]},
         "method": "eap-ig", "steps": 5, "granularity": "edge", "threshold": 0.85,
         "metrics": [...], "cluster_metric": "iou", "linkage": "average",
         "replicates": 20, "seed": 0, "out": "results"}
    """
    doc: dict = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            doc = json.loads(path.read_text())
        except ValueError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
        base = path.parent
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    doc = {**doc, **overrides}

    def resolve(p) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base / p

    if "out" in overrides:
        out = Path(overrides["out"])
    elif doc.get("out"):
        out = resolve(doc["out"])
    else:
        out = Path(os.environ.get(OUT_ENV) or DEFAULT_OUT)
    model = doc.get("model", {})
    recipe = None
    if "config" in model:
        try:
            seed = int(doc.get("seed", model["config"].get("seed", 0)))
            mc = ModelConfig.from_dict(dict(model["config"], seed=seed))
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad model config: {err}") from err
        recipe = TrainRecipe(mc, int(model.get("steps", 2000)), float(model.get("lr", 3e-3)),
                             int(model.get("batch_size", 64)))
    tasks = doc.get("tasks", {})
    try:
        cfg = RunConfig(
            out=out,
            checkpoint=resolve(model.get("checkpoint")),
            recipe=recipe,
            task_manifest=resolve(tasks.get("manifest")),
            generate=tuple(tasks.get("generate", ())),
            method=doc.get("method", "eap-ig"),
            steps=int(doc.get("steps", 5)),
            granularity=doc.get("granularity", "edge"),
            threshold=float(doc.get("threshold", 0.85)),
            metrics=tuple(doc.get("metrics", METRICS)),
            cluster_metric=doc.get("cluster_metric", "iou"),
            linkage=doc.get("linkage", "average"),
            replicates=int(doc.get("replicates", 20)),
            seed=int(doc.get("seed", 0)),
            qkv_split=bool(doc.get("qkv_split", True)),
        )
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return cfg


def config_record(cfg: RunConfig) -> dict:
    """JSON-ready view of a config, with paths as strings."""
    rec = asdict(cfg)
    for k, v in list(rec.items()):
        if isinstance(v, Path):
            rec[k] = str(v)
    if cfg.recipe is not None:
        rec["recipe"] = dict(rec["recipe"], config=cfg.recipe.config.to_dict())
    rec["generate"] = list(cfg.generate)
    rec["metrics"] = list(cfg.metrics)
    return rec


# -- workspace ---------------------------------------------------------------------------

def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Workspace:
    """The output directory and the artifacts written to it in this session."""

    root: Path
    written: dict[str, str] = field(default_factory=dict)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def write_text(self, rel: str, text: str, kind: str) -> Path:
        p = self.path(rel)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
        self.written[rel] = kind
        return p

    def write_json(self, rel: str, doc: dict, kind: str) -> Path:
        if kind in schemas.SCHEMAS:
            schemas.validate(doc, kind)
        return self.write_text(rel, _dumps(doc), kind)

    def read_json(self, rel: str) -> dict:
        p = self.path(rel)
        if not p.exists():
            raise StageError("load", f"missing artifact {rel}; run the producing stage first")
        return json.loads(p.read_text())

    def note(self, rel: str, kind: str) -> None:
        self.written[rel] = kind


# -- stages ------------------------------------------------------------------------------

def stage_tasks(cfg: RunConfig, ws: Workspace) -> list[TaskSpec]:
    if cfg.task_manifest is not None:
        try:
            return load_manifest(cfg.task_manifest)
        except TaskError as err:
            raise StageError("tasks", str(err)) from err
    tasks = []
    for g in cfg.generate:
        kind = g["kind"]
        tasks.append(generate_task(kind, int(g.get("size", 500)), int(g.get("seed", 0)),
                                   task_id=g.get("id"), family=g.get("family", DEFAULT_FAMILY[kind]),
                                   fact_seed=int(g.get("fact_seed", 0))))
    manifest = save_manifest(tasks, ws.path("tasks"))
    for t in tasks:
        ws.note(f"tasks/{t.task_id}.jsonl", "task")
    ws.note(str(manifest.relative_to(ws.root)), "task-manifest")
    return tasks


def stage_model(cfg: RunConfig, ws: Workspace, tasks: list[TaskSpec] | None = None,
                retrain: bool = False) -> Model:
    ckpt = ws.path("model.ckpt")
    if cfg.checkpoint is not None:
        config, params = load_checkpoint(cfg.checkpoint)
        return Model(config, params, cfg.qkv_split)
    if ckpt.exists() and not retrain:
        config, params = load_checkpoint(ckpt)
        if config == cfg.recipe.config:
            ws.note("model.ckpt", "checkpoint")
            return Model(config, params, cfg.qkv_split)
    if tasks is None:
        tasks = stage_tasks(cfg, ws)
    r = cfg.recipe
    log.info("training %s for %d steps", r.config, r.steps)
    result = train(r.config, tasks, steps=r.steps, lr=r.lr, batch_size=r.batch_size)
    save_checkpoint(ckpt, r.config, result.params)
    ws.note("model.ckpt", "checkpoint")
    model = Model(r.config, result.params, cfg.qkv_split)
    ws.write_json("training.json", {"losses": result.losses, "steps": r.steps, "lr": r.lr,
                                    "batch_size": r.batch_size}, "training")
    return model


def stage_evaluate(cfg: RunConfig, ws: Workspace, model: Model, tasks: list[TaskSpec]) -> dict:
    doc = {"tasks": [{"task": t.task_id, "family": t.family, "accuracy": eval_accuracy(model, t),
                      "m": eval_metric(model, t, "clean"), "m_null": eval_metric(model, t, "corrupted")}
                     for t in tasks]}
    ws.write_json("evaluation.json", doc, "evaluation")
    return doc


def _gran_dir(kind: str, cfg: RunConfig) -> str:
    return f"{kind}/{cfg.granularity}"


def stage_score(cfg: RunConfig, ws: Workspace, model: Model, tasks: list[TaskSpec]) -> list[ScoreTable]:
    tables = []
    for t in tasks:
        table = score(model, t, cfg.method, cfg.granularity, cfg.steps)
        ws.write_json(f"{_gran_dir('scores', cfg)}/{t.task_id}.json", table.to_json(), "scores")
        tables.append(table)
    return tables


def load_scores(cfg: RunConfig, ws: Workspace, tasks: list[TaskSpec]) -> list[ScoreTable]:
    return [ScoreTable.from_json(ws.read_json(f"{_gran_dir('scores', cfg)}/{t.task_id}.json"))
            for t in tasks]


def stage_find(cfg: RunConfig, ws: Workspace, model: Model, tasks: list[TaskSpec],
               tables: list[ScoreTable]) -> list[Circuit]:
    params = SearchParams(threshold=cfg.threshold, granularity=cfg.granularity, method=cfg.method,
                          steps=cfg.steps)
    circuits = []
    for t, table in zip(tasks, tables):
        res = find_minimal_circuit(model, t, table, params)
        circuit = res.circuit.with_members(res.circuit.members, provenance=dict(
            res.circuit.provenance, family=t.family, n_examples=len(t)))
        ws.write_json(f"{_gran_dir('circuits', cfg)}/{t.task_id}.json", circuit_to_json(circuit), "circuit")
        ws.write_json(f"{_gran_dir('faithfulness', cfg)}/{t.task_id}.json", res.report.to_json(),
                      "faithfulness")
        circuits.append(circuit)
    return circuits


def load_circuits(cfg: RunConfig, ws: Workspace, tasks: list[TaskSpec]) -> list[Circuit]:
    return [circuit_from_json(ws.read_json(f"{_gran_dir('circuits', cfg)}/{t.task_id}.json"))
            for t in tasks]


def stage_faithfulness(cfg: RunConfig, ws: Workspace, model: Model, tasks: list[TaskSpec],
                       circuits: list[Circuit]) -> list[dict]:
    reports = []
    for t, c in zip(tasks, circuits):
        rep = CircuitEvaluator(model, t).report(c).to_json()
        ws.write_json(f"{_gran_dir('faithfulness', cfg)}/{t.task_id}.json", rep, "faithfulness")
        reports.append(rep)
    return reports


def stage_compare(cfg: RunConfig, ws: Workspace, tasks: list[TaskSpec], circuits: list[Circuit],
                  model: Model | None = None) -> dict[str, SimilarityMatrix]:
    families = [t.family for t in tasks]
    out = {}
    for metric in cfg.metrics:
        if metric == "recall" and any(len(c) == 0 for c in circuits):
            log.warning("skipping recall: some circuit is empty")
            continue
        M = similarity_matrix(circuits, families, metric, model=model, tasks=tasks)
        rel = f"{_gran_dir('matrices', cfg)}/{metric}"
        ws.write_json(rel + ".json", M.to_json(), "matrix")
        ws.write_text(rel + ".csv", M.to_csv(), "matrix-csv")
        out[metric] = M
    return out


def stage_cluster(cfg: RunConfig, ws: Workspace, matrix: SimilarityMatrix) -> Dendrogram:
    d = cluster(matrix, cfg.linkage)
    ws.write_json(f"{_gran_dir('dendrograms', cfg)}/{matrix.metric}.json", d.to_json(), "dendrogram")
    return d


def stage_baseline(cfg: RunConfig, ws: Workspace, model: Model, circuits: list[Circuit]) -> dict:
    if cfg.granularity != "edge":
        raise StageError("baseline", "dummy-circuit baselines are defined for edge circuits")
    doc = baseline_report(circuits, model.graph, cfg.replicates, cfg.seed)
    ws.write_json("baseline.json", doc, "baseline")
    return doc


def stage_intersect(cfg: RunConfig, ws: Workspace, model: Model, circuits: list[Circuit]) -> dict:
    if cfg.granularity != "edge":
        raise StageError("intersect", "structure profiles are defined for edge circuits")
    doc = intersect_and_profile(circuits, model.graph)
    ws.write_json("structure.json", doc, "structure")
    return doc


def stage_report(cfg: RunConfig, ws: Workspace) -> list[str]:
    """Render SVGs for every matrix, dendrogram and structure report present."""
    made = []
    for p in sorted(ws.root.glob("matrices/*/*.json")):
        M = SimilarityMatrix.from_json(json.loads(p.read_text()))
        lo = min(0.0, float(M.values.min()))
        hi = max(1.0, float(M.values.max())) if M.metric == "cross_faithfulness" else 1.0
        made.append(_svg(ws, p.with_suffix(".svg"), render_matrix(M, lo, hi)))
    for p in sorted(ws.root.glob("dendrograms/*/*.json")):
        made.append(_svg(ws, p.with_suffix(".svg"), render_dendrogram(Dendrogram.from_json(json.loads(p.read_text())))))
    sp = ws.path("structure.json")
    if sp.exists():
        made.append(_svg(ws, sp.with_suffix(".svg"), render_structure(json.loads(sp.read_text()))))
    return made


def _svg(ws: Workspace, path: Path, text: str) -> str:
    rel = str(path.relative_to(ws.root))
    ws.write_text(rel, text, "svg")
    return rel


# -- whole pipeline ----------------------------------------------------------------------

def write_manifest(cfg: RunConfig, ws: Workspace, status: str = "ok", error: dict | None = None,
                   merge: bool = False) -> Path:
    """Index the session's artifacts; with merge, keep earlier entries whose files still exist."""
    kinds = {}
    old = ws.path("manifest.json")
    if merge and old.exists():
        kinds = {a["path"]: a["kind"] for a in json.loads(old.read_text()).get("artifacts", [])}
    kinds.update(ws.written)
    artifacts = [{"path": rel, "kind": kind, "sha256": sha256_file(ws.path(rel))}
                 for rel, kind in sorted(kinds.items()) if ws.path(rel).exists()]
    doc = {
        "status": status, "failed": status != "ok", "error": error,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "config": config_record(cfg), "artifacts": artifacts,
    }
    schemas.validate(doc, "manifest")
    ws.root.mkdir(parents=True, exist_ok=True)
    path = ws.path("manifest.json")
    path.write_text(_dumps(doc))
    return path


def run_pipeline(cfg: RunConfig) -> tuple[int, Workspace]:
    """Run every stage; returns (exit status, workspace).

    Status 0 on success, 2 on a config error (nothing written but the
    manifest), 1 when a later stage fails (partial artifacts kept and the
    manifest flagged as failed).
    """
    ws = Workspace(Path(cfg.out))
    try:
        cfg.validate()
    except ConfigError as err:
        write_manifest(cfg, ws, "config-error", {"stage": "config", "message": str(err)})
        return 2, ws
    stage = "tasks"
    try:
        tasks = stage_tasks(cfg, ws)
        if len({t.task_id for t in tasks}) != len(tasks):
            raise StageError("tasks", "task ids must be unique")
        stage = "train"
        model = stage_model(cfg, ws, tasks)
        stage = "evaluate"
        stage_evaluate(cfg, ws, model, tasks)
        stage = "score"
        tables = stage_score(cfg, ws, model, tasks)
        stage = "find"
        circuits = stage_find(cfg, ws, model, tasks, tables)
        stage = "compare"
        matrices = stage_compare(cfg, ws, tasks, circuits, model)
        stage = "cluster"
        if len(tasks) >= 2 and cfg.cluster_metric in matrices:
            stage_cluster(cfg, ws, matrices[cfg.cluster_metric])
        if cfg.granularity == "edge":
            stage = "baseline"
            stage_baseline(cfg, ws, model, circuits)
            if len(circuits) >= 2:
                stage = "intersect"
                stage_intersect(cfg, ws, model, circuits)
        stage = "report"
        stage_report(cfg, ws)
    except Exception as err:  # any stage failure is recorded, then reported
        log.exception("stage %s failed", stage)
        write_manifest(cfg, ws, "stage-error",
                       {"stage": getattr(err, "stage", stage), "type": type(err).__name__,
                        "message": str(err)})
        return 1, ws
    write_manifest(cfg, ws)
    return 0, ws


def with_overrides(cfg: RunConfig, **changes) -> RunConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})

