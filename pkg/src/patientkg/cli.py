"""Command-line entry point: ``patientkg <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import pipeline as P
from .kg_ingest import (Category, MedicalCode, TripleStore, fetch_remote_triples, read_triples,
                        write_concept_kgs)
from .patient_graph import read_ehr
from .synth import SynthConfig
from .train import TrainConfig

log = logging.getLogger("patientkg")


def _print_json(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def cmd_synth(args) -> int:
    kw = {f.name: getattr(args, f.name) for f in fields(SynthConfig)
          if getattr(args, f.name, None) is not None}
    paths = P.run_synth(SynthConfig(**kw), args.out)
    _print_json({k: str(v) for k, v in paths.items()})
    return 0


def cmd_ingest(args) -> int:
    if args.mode == "store":
        if not args.triples:
            raise SystemExit("store mode needs --triples")
        store = TripleStore(read_triples(args.triples[0]))
        if args.code:
            codes = [MedicalCode(c, Category(args.category)) for c in args.code]
        elif args.ehr:
            codes = P.ehr_codes(read_ehr(args.ehr))
        else:
            raise SystemExit("give --code or --ehr")
        kgs = P.ingest_store(codes, store, args.kappa, args.epsilon, args.seed)
    else:
        if not args.code or len(args.code) != 1:
            raise SystemExit("llm mode aggregates responses for exactly one --code")
        code = MedicalCode(args.code[0], Category(args.category))
        responses = [Path(p).read_text(encoding="utf-8") for p in args.triples or []]
        if args.endpoint:
            prompt = f"List knowledge-graph triples [head, relation, tail] about {code.id}."
            while len(responses) < args.chi:
                responses.append(fetch_remote_triples(args.endpoint, prompt, args.timeout))
        if len(responses) < 1:
            raise SystemExit("llm mode needs response files via --triples or an --endpoint")
        kgs = [P.ingest_llm(code, responses[: args.chi])]
    write_concept_kgs(args.out, kgs)
    _print_json({"codes": len(kgs), "triples": sum(len(k) for k in kgs)})
    return 0


def cmd_cluster(args) -> int:
    g = P.run_cluster(args.triples, args.embeddings, args.out, args.delta, args.linkage, args.seed)
    _print_json(g.stats())
    return 0


def cmd_compose(args) -> int:
    n = P.run_compose(args.ehr, args.graph, args.out, args.rows)
    _print_json({"patients": n})
    return 0


def cmd_train(args) -> int:
    split = tuple(float(x) for x in args.split.split(","))
    tcfg = TrainConfig(lr=args.lr, weight_decay=args.weight_decay, batch_size=args.batch_size,
                       epochs=args.epochs, patience=min(args.patience, args.epochs),
                       split=split, seed=args.seed)
    summary = P.run_train(args.patients, args.graph, args.out, args.task, args.mode, args.ablate,
                          args.seed, args.embeddings, args.hidden, args.layers, args.gamma, tcfg)
    _print_json(summary)
    return 0


def cmd_eval(args) -> int:
    out = args.out or Path(args.ckpt) / f"metrics_{args.split}.json"
    _print_json(P.run_eval(args.ckpt, args.split, out))
    return 0


def cmd_explain(args) -> int:
    _print_json(P.run_explain(args.ckpt, args.patient, args.out, args.k, args.format))
    return 0


def cmd_pipeline(args) -> int:
    overrides = {k: getattr(args, "opt_" + k) for k in P.DEFAULTS}
    cfg = P.load_config(args.config, overrides)
    manifest = P.run_pipeline(cfg)
    _print_json({"metrics": manifest["metrics"], "train": manifest["train"]})
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="patientkg", description=__doc__)
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort, triple store and embeddings")
    for f in fields(SynthConfig):
        s.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=type(f.default))
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="build concept graphs for medical codes")
    s.add_argument("--mode", choices=["store", "llm"], default="store")
    s.add_argument("--triples", nargs="+", help="triple store TSV, or raw response files in llm mode")
    s.add_argument("--code", action="append")
    s.add_argument("--category", choices=[c.value for c in Category], default="condition")
    s.add_argument("--ehr", help="ingest every code in this EHR file")
    s.add_argument("--chi", type=int, default=3)
    s.add_argument("--kappa", type=int, default=2)
    s.add_argument("--epsilon", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--endpoint", help="remote model endpoint (llm mode)")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("cluster", help="cluster entities and relations into the global graph")
    s.add_argument("--triples", nargs="+", required=True, help="concept graph files from ingest")
    s.add_argument("--embeddings", required=True)
    s.add_argument("--delta", type=float, default=P.DEFAULT_DELTA)
    s.add_argument("--linkage", choices=["average", "complete"], default="average")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_cluster)

    s = sub.add_parser("compose", help="write per-patient graphs")
    s.add_argument("--ehr", required=True)
    s.add_argument("--graph", required=True)
    s.add_argument("--rows", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_compose)

    s = sub.add_parser("train", help="train a model and write a checkpoint directory")
    s.add_argument("--patients", required=True, help="EHR JSONL")
    s.add_argument("--graph", required=True)
    s.add_argument("--embeddings", help="embedding table used for attention initialization")
    s.add_argument("--task", choices=["mortality", "readmission", "los", "drugrec"],
                   default="mortality")
    s.add_argument("--mode", choices=["graph", "node", "joint"], default="joint")
    s.add_argument("--ablate", default="", help="comma list of a (node attention), "
                   "b (visit attention), w (edge weights)")
    s.add_argument("--hidden", type=int, default=128)
    s.add_argument("--layers", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--lr", type=float, default=1e-5)
    s.add_argument("--weight-decay", type=float, default=1e-5)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--epochs", type=int, default=50)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--split", default="0.8,0.1,0.1")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="metrics report for a split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--split", choices=["train", "val", "test"], default="test")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("explain", help="importance scores and annotated graph export")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--patient")
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--format", choices=["dot", "graphml"], default="dot")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_explain)

    s = sub.add_parser("pipeline", help="run every stage from one config file")
    s.add_argument("--config")
    for key, default in P.DEFAULTS.items():
        kind = str if isinstance(default, bool) else type(default)
        s.add_argument("--" + key.replace("_", "-"), dest="opt_" + key, type=kind)
    s.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except P.StageError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
