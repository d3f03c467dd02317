"""Personalized patient graphs built from the clustered global graph."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .clustering import GlobalGraph
from .kg_ingest import Category, MedicalCode


class UnknownCode(KeyError):
    pass


class EmptyDirectSet(ValueError):
    pass


@dataclass
class Visit:
    t_admit: float
    t_discharge: float
    codes: list[MedicalCode]
    mortality: int | None = None
    los_days: float | None = None

    def __post_init__(self):
        if self.t_discharge < self.t_admit:
            raise ValueError("discharge precedes admission")

    def codes_of(self, categories: Iterable[Category] | None) -> list[MedicalCode]:
        if categories is None:
            return list(self.codes)
        cats = set(categories)
        return [c for c in self.codes if c.category in cats]


@dataclass
class Patient:
    id: str
    visits: list[Visit]

    def __post_init__(self):
        if not self.visits:
            raise ValueError(f"patient {self.id} has no visits")
        times = [v.t_admit for v in self.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"patient {self.id}: visits not strictly increasing in time")

    def prefix(self, t: int) -> "Patient":
        """The first ``t`` visits."""
        return Patient(self.id, self.visits[:t])


@dataclass
class PatientGraph:
    """Node/edge sets per visit; the patient node is implicit in every real visit.

    ``visit_nodes[j]`` and ``visit_edges[j]`` hold global node/edge ids of
    visit ``j`` (0-based). ``visit_anchors[j]`` are the anchor nodes wired
    to the patient node during that visit. Rows ``j >= n_visits`` of the
    multi-hot matrix are padding.
    """

    patient_id: str
    n_rows: int
    n_global: int
    visit_nodes: list[np.ndarray]
    visit_edges: list[np.ndarray]
    visit_anchors: list[np.ndarray]
    direct: np.ndarray
    patient_embedding: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_visits(self) -> int:
        return len(self.visit_nodes)

    @property
    def patient_degree(self) -> int:
        return int(self.direct.size)

    def multihot(self) -> np.ndarray:
        g = np.zeros((self.n_rows, self.n_global), dtype=np.float64)
        for j, nodes in enumerate(self.visit_nodes):
            g[j, nodes] = 1.0
        return g

    def nodes(self) -> np.ndarray:
        return np.unique(np.concatenate(self.visit_nodes)) if self.visit_nodes else np.zeros(0, np.int64)

    def edges(self) -> np.ndarray:
        return np.unique(np.concatenate(self.visit_edges)) if self.visit_edges else np.zeros(0, np.int64)

    def with_rows(self, n_rows: int) -> "PatientGraph":
        """Same graph with ``n_rows`` multi-hot rows (``>= n_visits``)."""
        if n_rows < self.n_visits:
            raise ValueError("row count below the visit count")
        return PatientGraph(self.patient_id, n_rows, self.n_global, self.visit_nodes,
                            self.visit_edges, self.visit_anchors, self.direct,
                            self.patient_embedding)


def compose_patient_graph(patient: Patient, g: GlobalGraph, n_rows: int | None = None,
                          categories: Iterable[Category] | None = None) -> PatientGraph:
    """Merge the clustered per-code subgraphs of each visit.

    With more visits than ``n_rows`` only the most recent ``n_rows`` are
    kept. ``categories`` restricts which codes act as features.
    """
    visits = patient.visits
    if n_rows is None:
        n_rows = len(visits)
    if n_rows < 1:
        raise ValueError("n_rows must be >= 1")
    visits = visits[-n_rows:]
    cats = None if categories is None else tuple(categories)
    vn, ve, va = [], [], []
    direct: set[int] = set()
    for v in visits:
        nodes: set[int] = set()
        edges: set[int] = set()
        anchors: set[int] = set()
        for code in v.codes_of(cats):
            key = code.id
            if key not in g.anchors:
                raise UnknownCode(key)
            a = g.anchors[key]
            anchors.add(a)
            nodes.update(g.code_nodes[key])
            edges.update(g.code_edges[key])
        direct |= anchors
        vn.append(np.array(sorted(nodes), dtype=np.int64))
        ve.append(np.array(sorted(edges), dtype=np.int64))
        va.append(np.array(sorted(anchors), dtype=np.int64))
    pg = PatientGraph(patient.id, n_rows, g.n_nodes, vn, ve, va,
                      np.array(sorted(direct), dtype=np.int64))
    if pg.direct.size:
        pg.patient_embedding = patient_node_init_embedding(pg, g)
    return pg


def patient_node_init_embedding(pg: PatientGraph, g: GlobalGraph) -> np.ndarray:
    """Mean of the input embeddings of the patient's direct (anchor) nodes."""
    if pg.direct.size == 0:
        raise EmptyDirectSet(f"patient {pg.patient_id} has no direct EHR nodes")
    return g.node_embeddings[pg.direct].mean(axis=0)


# ---------------------------------------------------------------- EHR files

_CATEGORY_KEYS = (("conditions", Category.CONDITION), ("procedures", Category.PROCEDURE),
                  ("drugs", Category.DRUG))


def patient_from_json(obj: dict) -> Patient:
    visits = []
    for v in obj["visits"]:
        codes = [MedicalCode(str(c), cat) for key, cat in _CATEGORY_KEYS for c in v.get(key, [])]
        visits.append(Visit(float(v["t_admit"]), float(v["t_discharge"]), codes,
                            v.get("mortality"), v.get("los_days")))
    return Patient(str(obj["id"]), visits)


def patient_to_json(p: Patient) -> dict:
    visits = []
    for v in p.visits:
        rec = {"t_admit": v.t_admit, "t_discharge": v.t_discharge}
        for key, cat in _CATEGORY_KEYS:
            rec[key] = [c.id for c in v.codes if c.category == cat]
        rec["mortality"] = v.mortality
        rec["los_days"] = v.los_days
        visits.append(rec)
    return {"id": p.id, "visits": visits}


def read_ehr(path: str | os.PathLike) -> list[Patient]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(patient_from_json(json.loads(line)))
    return out


def write_ehr(path: str | os.PathLike, patients: Sequence[Patient]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in patients:
            fh.write(json.dumps(patient_to_json(p), sort_keys=True) + "\n")


def max_visits(patients: Sequence[Patient]) -> int:
    return max(len(p.visits) for p in patients)


def patient_graph_to_json(pg: PatientGraph) -> dict:
    return {
        "id": pg.patient_id,
        "n_rows": pg.n_rows,
        "n_global": pg.n_global,
        "visits": [{"nodes": n.tolist(), "edges": e.tolist(), "anchors": a.tolist()}
                   for n, e, a in zip(pg.visit_nodes, pg.visit_edges, pg.visit_anchors)],
        "direct": pg.direct.tolist(),
    }


def patient_graph_from_json(obj: dict, g: GlobalGraph | None = None) -> PatientGraph:
    arr = lambda xs: np.asarray(xs, dtype=np.int64)
    visits = obj["visits"]
    pg = PatientGraph(str(obj["id"]), int(obj["n_rows"]), int(obj["n_global"]),
                      [arr(v["nodes"]) for v in visits], [arr(v["edges"]) for v in visits],
                      [arr(v["anchors"]) for v in visits], arr(obj["direct"]))
    if g is not None and pg.direct.size:
        pg.patient_embedding = patient_node_init_embedding(pg, g)
    return pg


def write_patient_graphs(path: str | os.PathLike, graphs: Iterable[PatientGraph]) -> None:
    """One JSON object per line; embeddings are not stored (derivable from the global graph)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pg in graphs:
            fh.write(json.dumps(patient_graph_to_json(pg), sort_keys=True) + "\n")


def read_patient_graphs(path: str | os.PathLike, g: GlobalGraph | None = None) -> list[PatientGraph]:
    with open(path, encoding="utf-8") as fh:
        return [patient_graph_from_json(json.loads(line), g) for line in fh if line.strip()]
