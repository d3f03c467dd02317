"""Stage functions behind the command line, plus the flat run configuration."""
from __future__ import annotations

import configparser
import hashlib
import json
import logging
import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Sequence

from .clustering import DEFAULT_DELTA, GlobalGraph, cluster_concept_kgs
from .interpret import export_graph, importance_scores, top_k
from .kg_ingest import (ConceptKG, MedicalCode, TripleStore, UnknownEntity, aggregate_runs,
                        parse_llm_triples, read_concept_kgs, read_embeddings, read_triples,
                        sample_subgraph, write_concept_kgs)
from .model import BatModel, ModelConfig, TaskKind
from .patient_graph import Patient, compose_patient_graph, read_ehr, write_patient_graphs
from .synth import SynthConfig, generate_cohort, write_cohort
from .train import Dataset, TrainConfig, build_model, evaluate, train, train_config_json

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
RUN_NAME = "run.json"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path: str | os.PathLike, obj: Any) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def parse_ablate(text: str | Sequence[str] | None) -> dict[str, bool]:
    """``"a,b,w"`` switches off node attention, visit attention, edge weights."""
    if not text:
        items: list[str] = []
    elif isinstance(text, str):
        items = [s.strip() for s in text.split(",") if s.strip()]
    else:
        items = list(text)
    unknown = set(items) - {"a", "b", "w"}
    if unknown:
        raise ValueError(f"unknown ablation toggles {sorted(unknown)}; use a, b, w")
    return {"use_alpha": "a" not in items, "use_beta": "b" not in items,
            "use_edge_weights": "w" not in items}


# ---------------------------------------------------------------- stages

def run_synth(config: SynthConfig, out_dir: str | os.PathLike) -> dict[str, Path]:
    return write_cohort(generate_cohort(config), out_dir)


def ehr_codes(patients: Sequence[Patient]) -> list[MedicalCode]:
    return sorted({c for p in patients for v in p.visits for c in v.codes},
                  key=lambda c: (c.category.value, c.id))


def ingest_store(codes: Sequence[MedicalCode], store: TripleStore, kappa: int = 2,
                 epsilon: int = 5, seed: int = 0) -> list[ConceptKG]:
    """One sampled subgraph per code; code ``i`` uses seed ``seed + i``."""
    out = []
    for i, code in enumerate(codes):
        try:
            out.append(sample_subgraph(code, store, kappa, epsilon, seed + i))
        except UnknownEntity:
            log.warning("code %s is absent from the triple store", code.id)
            out.append(ConceptKG(code, frozenset()))
    return out


def ingest_llm(code: MedicalCode, responses: Sequence[str]) -> ConceptKG:
    """Aggregate ``chi`` raw model responses into one concept graph."""
    runs = []
    for text in responses:
        parsed = parse_llm_triples(text)
        if parsed.skipped:
            log.warning("%s: skipped %d malformed lines", code.id, len(parsed.skipped))
        runs.append(parsed.triples)
    return aggregate_runs(runs, code)


def run_cluster(kg_paths: Sequence[str | os.PathLike], embeddings: str | os.PathLike,
                out: str | os.PathLike, delta: float = DEFAULT_DELTA, linkage: str = "average",
                seed: int = 0) -> GlobalGraph:
    kgs: list[ConceptKG] = []
    for p in kg_paths:
        kgs.extend(read_concept_kgs(p))
    provider = read_embeddings(embeddings, seed=seed)
    g = cluster_concept_kgs(kgs, provider, delta, linkage)
    g.save(out)
    if provider.misses:
        log.warning("%d strings had no stored embedding; fallback vectors used", provider.misses)
    return g


def run_compose(ehr: str | os.PathLike, graph: str | os.PathLike, out: str | os.PathLike,
                n_rows: int | None = None) -> int:
    g = GlobalGraph.load(graph)
    patients = read_ehr(ehr)
    rows = n_rows or max(len(p.visits) for p in patients)
    write_patient_graphs(out, (compose_patient_graph(p, g, rows) for p in patients))
    return len(patients)


def _rel(path: str | os.PathLike | None, base: Path) -> str | None:
    return None if path is None else os.path.relpath(os.path.abspath(path), base)


def run_train(ehr: str | os.PathLike, graph: str | os.PathLike, out_dir: str | os.PathLike,
              task: str = "mortality", mode: str = "joint", ablate: str | None = None,
              seed: int = 0, embeddings: str | os.PathLike | None = None,
              hidden: int = 128, layers: int | None = None, gamma: float | None = None,
              train_config: TrainConfig | None = None) -> dict:
    """Train and write ``model.ckpt`` plus ``run.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    g = GlobalGraph.load(graph)
    data = Dataset(read_ehr(ehr), g, task)
    overrides = {"mode": mode, "hidden": hidden, **parse_ablate(ablate)}
    if layers is not None:
        overrides["layers"] = layers
    if gamma is not None:
        overrides["gamma"] = gamma
    mcfg = ModelConfig.for_task(task, **overrides)
    provider = read_embeddings(embeddings, seed=seed) if embeddings else None
    model = build_model(data, mcfg, seed=seed, provider=provider)
    tcfg = train_config or TrainConfig(seed=seed)
    result = train(data, model, tcfg)
    history = [{k: v for k, v in h.items() if k != "seconds"} for h in result.history]
    extra = {
        "train": train_config_json(tcfg),
        "splits": {"train": result.splits[0], "val": result.splits[1], "test": result.splits[2]},
        "best_epoch": result.best_epoch,
        "best_val_score": result.best_score,
        "drug_vocab": data.drug_vocab,
        "max_visits": data.max_visits,
    }
    result.model.save(out / CHECKPOINT_NAME, extra)
    write_json(out / RUN_NAME, {
        "ehr": _rel(ehr, out), "graph": _rel(graph, out), "embeddings": _rel(embeddings, out),
        "task": TaskKind(task).value, "history": history,
    })
    return {"best_epoch": result.best_epoch, "best_val_score": result.best_score,
            "epochs_run": len(history)}


def load_run(ckpt_dir: str | os.PathLike) -> tuple[BatModel, dict, Dataset, dict]:
    ckpt = Path(ckpt_dir)
    with open(ckpt / RUN_NAME, encoding="utf-8") as fh:
        run = json.load(fh)
    model, header = BatModel.load(ckpt / CHECKPOINT_NAME)
    g = GlobalGraph.load(ckpt / run["graph"])
    model.bind(g)
    extra = header["extra"]
    data = Dataset(read_ehr(ckpt / run["ehr"]), g, run["task"], drug_vocab=extra["drug_vocab"],
                   max_visits=extra["max_visits"])
    return model, header, data, run


def run_eval(ckpt_dir: str | os.PathLike, split: str = "test",
             out: str | os.PathLike | None = None) -> dict:
    model, header, data, run = load_run(ckpt_dir)
    splits = header["extra"]["splits"]
    if split not in splits:
        raise ValueError(f"split must be one of {sorted(splits)}")
    idx = data.indices_for(splits[split])
    report = {"task": run["task"], "split": split, "metrics": evaluate(model, data, idx)}
    if out is not None:
        write_json(out, report)
    return report


def run_explain(ckpt_dir: str | os.PathLike, patient_id: str | None, out: str | os.PathLike,
                k: int = 20, fmt: str = "dot") -> dict:
    """Scores for the patient's most recent sample; the first test patient by default."""
    model, header, data, _ = load_run(ckpt_dir)
    if patient_id is None:
        with_samples = {s.patient_id for s in data.samples}
        candidates = sorted(set(header["extra"]["splits"]["test"]) & with_samples)
        patient_id = (candidates or sorted(with_samples))[0]
    idx = [i for i, s in enumerate(data.samples) if s.patient_id == patient_id]
    if not idx:
        raise KeyError(f"patient {patient_id} has no samples for this task")
    batch, _ = data.batch(idx[-1:])
    model.forward(batch)
    report = importance_scores(model, patient_id)
    export_graph(report, out, fmt, data.graph, k)
    nodes, edges = top_k(report, k)
    return {"patient": patient_id, "top_nodes": nodes, "top_edges": [list(e) for e in edges]}


# ---------------------------------------------------------------- config

SYNTH_PREFIX = "synth_"

DEFAULTS: dict[str, Any] = {
    "out_dir": "run",
    "seed": 0,
    "ehr": "",
    "triples": "",
    "embeddings": "",
    "kg_mode": "store",
    "chi": 3,
    "kappa": 2,
    "epsilon": 5,
    "delta": DEFAULT_DELTA,
    "linkage": "average",
    "task": "mortality",
    "mode": "joint",
    "ablate": "",
    "hidden": 128,
    "layers": 0,
    "gamma": -1.0,
    "lr": 1e-5,
    "weight_decay": 1e-5,
    "batch_size": 4,
    "epochs": 50,
    "patience": 10,
    "split": "0.8,0.1,0.1",
    "eval_split": "test",
    "explain_patient": "",
    "k": 20,
    "format": "dot",
}
for _f in fields(SynthConfig):
    DEFAULTS[SYNTH_PREFIX + _f.name] = _f.default


def _coerce(key: str, value: Any) -> Any:
    if key not in DEFAULTS:
        raise KeyError(f"unknown config key {key!r}")
    kind = type(DEFAULTS[key])
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    if kind is bool:
        return text.lower() in ("1", "true", "yes", "on")
    return kind(text)


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> dict:
    """Flat ``key = value`` file; ``overrides`` (command-line flags) win."""
    cfg = dict(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        with open(path, encoding="utf-8") as fh:
            parser.read_string("[run]\n" + fh.read())
        for key, value in parser["run"].items():
            cfg[key] = _coerce(key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = _coerce(key, value)
    return cfg


def synth_config(cfg: dict) -> SynthConfig:
    kw = {f.name: cfg[SYNTH_PREFIX + f.name] for f in fields(SynthConfig)}
    if kw["seed"] == SynthConfig.seed:
        kw["seed"] = cfg["seed"]
    return SynthConfig(**kw)


def _stage(name: str, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except Exception as exc:  # re-raised with the stage name attached
        raise StageError(name, exc) from exc


def run_pipeline(cfg: dict) -> dict:
    """synth (when no EHR given) -> ingest -> cluster -> compose -> train -> eval -> explain."""
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    files: dict[str, Path] = {}

    if not cfg["ehr"]:
        sc = synth_config(cfg)
        made = _stage("synth", run_synth, sc, out / "data")
        files.update({"ehr": made["ehr"], "triples": made["triples"],
                      "embeddings": made["embeddings"], "planted": made["rules"]})
    else:
        files.update({"ehr": Path(cfg["ehr"]), "triples": Path(cfg["triples"]),
                      "embeddings": Path(cfg["embeddings"])})

    def ingest():
        if cfg["kg_mode"] != "store":
            raise ValueError("the pipeline ingests from a triple store; use the ingest "
                             "subcommand for raw model responses")
        patients = read_ehr(files["ehr"])
        store = TripleStore(read_triples(files["triples"]))
        kgs = ingest_store(ehr_codes(patients), store, cfg["kappa"], cfg["epsilon"], seed)
        write_concept_kgs(out / "concept_kgs.tsv", kgs)
        return out / "concept_kgs.tsv"

    files["concept_kgs"] = _stage("ingest", ingest)
    files["graph"] = out / "global_graph.json"
    _stage("cluster", run_cluster, [files["concept_kgs"]], files["embeddings"], files["graph"],
           cfg["delta"], cfg["linkage"], seed)
    files["graph_blob"] = out / "global_graph.json.f64"
    files["patient_graphs"] = out / "patient_graphs.jsonl"
    _stage("compose", run_compose, files["ehr"], files["graph"], files["patient_graphs"])

    tcfg = TrainConfig(lr=cfg["lr"], weight_decay=cfg["weight_decay"],
                       batch_size=cfg["batch_size"], epochs=cfg["epochs"],
                       patience=min(cfg["patience"], cfg["epochs"]),
                       split=tuple(float(x) for x in cfg["split"].split(",")), seed=seed)
    ckpt = out / "ckpt"
    summary = _stage("train", run_train, files["ehr"], files["graph"], ckpt, cfg["task"],
                     cfg["mode"], cfg["ablate"], seed, files["embeddings"], cfg["hidden"],
                     cfg["layers"] or None, None if cfg["gamma"] < 0 else cfg["gamma"], tcfg)
    files["checkpoint"] = ckpt / CHECKPOINT_NAME
    files["run"] = ckpt / RUN_NAME
    files["metrics"] = out / "metrics.json"
    report = _stage("eval", run_eval, ckpt, cfg["eval_split"], files["metrics"])
    files["explanation"] = out / f"explanation.{cfg['format']}"
    explained = _stage("explain", run_explain, ckpt, cfg["explain_patient"] or None,
                       files["explanation"], cfg["k"], cfg["format"])

    manifest = {
        "config": {k: cfg[k] for k in sorted(cfg) if k != "out_dir"},
        "seeds": {"run": seed, "synth": synth_config(cfg).seed if not cfg["ehr"] else None,
                  "ingest": seed, "model": seed, "split": seed},
        "files": {name: {"path": _rel(p, out), "sha256": sha256_file(p)}
                  for name, p in sorted(files.items())},
        "train": summary,
        "metrics": report["metrics"],
        "explain": explained,
    }
    write_json(out / "manifest.json", manifest)
    return manifest
