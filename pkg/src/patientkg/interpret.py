"""Entity and relation importance scores and annotated graph export.

Entity score of node ``k``: ``(L - 1) * sum_j alpha[j, k] * beta[j]`` over the
visits containing ``k``. Node attention is shared across layers, so each
of the ``L - 1`` summed layers contributes the same term. Relation score
of an edge of type ``r``: ``sum_{l=1}^{L-1} w_R^(l)[r]``. With one layer
both sums are empty and every score is zero.
"""
from __future__ import annotations

import html
import os
import re
from dataclasses import dataclass
from typing import Sequence

import networkx as nx
import numpy as np

from .clustering import GlobalGraph
from .model import BatModel
from .patient_graph import PatientGraph


class ModelNotRun(RuntimeError):
    pass


class IoError(OSError):
    pass


@dataclass
class ImportanceReport:
    """Scores for one patient.

    Node ids are global cluster ids; the patient node takes id ``M`` (the
    number of global nodes). Edges are ``(head, relation, tail)`` in the
    same id space, the relation ``R`` (number of edge types) marking
    patient edges.
    """

    patient_id: str
    n_global: int
    n_relations: int
    node_ids: np.ndarray
    node_scores: np.ndarray
    edges: list[tuple[int, int, int]]
    edge_scores: np.ndarray
    direct: np.ndarray

    @property
    def patient_node(self) -> int:
        return self.n_global


def top_k_indices(scores: Sequence[float], K: int, ids: Sequence | None = None) -> np.ndarray:
    """Positions of the ``K`` largest scores; ties go to the lower id."""
    if K < 1:
        raise ValueError("K must be >= 1")
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    keys = np.arange(s.size) if ids is None else np.asarray(ids)
    if keys.ndim == 1:
        order = np.lexsort((keys, -s))
    else:
        # tuple ids: last column sorts least significant
        order = np.lexsort(tuple(keys[:, c] for c in range(keys.shape[1] - 1, -1, -1)) + (-s,))
    return order[:K]


def top_k(report: ImportanceReport, K: int) -> tuple[list[int], list[tuple[int, int, int]]]:
    nodes = top_k_indices(report.node_scores, K, report.node_ids)
    edge_ids = np.asarray(report.edges, dtype=np.int64).reshape(-1, 3)
    edges = top_k_indices(report.edge_scores, K, edge_ids) if len(report.edges) else []
    return ([int(report.node_ids[i]) for i in nodes],
            [tuple(int(x) for x in report.edges[i]) for i in edges])


def importance_scores(model: BatModel, patient: PatientGraph | str) -> ImportanceReport:
    """Scores for a patient in the batch of the model's most recent forward pass."""
    trace = model.trace
    if trace is None:
        raise ModelNotRun("run a forward pass before computing importance scores")
    pid = patient if isinstance(patient, str) else patient.patient_id
    batch = trace.batch
    hits = [b for b, s in enumerate(batch.structures) if s.patient_id == pid]
    if not hits:
        raise ModelNotRun(f"patient {pid} was not in the last forward pass")
    b = hits[0]
    s = batch.structures[b]
    m = model.n_nodes
    extra_layers = model.config.layers - 1

    rows = batch.row_offsets[b] + s.inst_row
    contrib = trace.alpha[rows, s.inst_slot] * trace.beta[rows]
    local_scores = np.zeros(s.n_local)
    np.add.at(local_scores, s.inst_node, contrib)
    local_scores *= extra_layers
    node_ids = np.where(s.node_ids < 0, m, s.node_ids)

    rel = np.zeros(model.n_edge_types + 1)
    for w in trace.edge_weights[:extra_layers]:
        rel = rel + w
    edges = [(int(node_ids[u]), r, int(node_ids[v])) for u, r, v in s.edge_list]
    edges.sort()
    edge_scores = np.array([rel[r] for _, r, _ in edges], dtype=np.float64)
    order = np.argsort(node_ids, kind="stable")
    return ImportanceReport(pid, m, model.n_edge_types, node_ids[order], local_scores[order],
                            edges, edge_scores, np.sort(s.node_ids[s.direct_local]))


# ---------------------------------------------------------------- export

def _minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x
    span = x.max() - x.min()
    return np.zeros_like(x) if span == 0 else (x - x.min()) / span


def _name(members) -> str:
    return members if isinstance(members, str) else " | ".join(members)


def annotated_graph(report: ImportanceReport, g: GlobalGraph | None = None,
                    K: int | None = None) -> nx.MultiDiGraph:
    """Graph with per-node/edge score, size, darkness and role attributes."""
    top_nodes, top_edges = top_k(report, K) if K else (set(), set())
    top_nodes, top_edges = set(top_nodes), set(top_edges)
    direct = set(int(d) for d in report.direct)
    out = nx.MultiDiGraph(patient=report.patient_id)
    norm = _minmax(report.node_scores)
    for nid, score, z in zip(report.node_ids, report.node_scores, norm):
        nid = int(nid)
        is_patient = nid == report.patient_node
        if is_patient:
            label = f"patient {report.patient_id}"
        else:
            label = _name(g.node_names[nid]) if g is not None else str(nid)
        out.add_node(str(nid), label=label, score=float(score), size=float(0.3 + 1.2 * z),
                     darkness=float(z), direct=int(nid in direct), patient=int(is_patient),
                     top=int(nid in top_nodes))
    enorm = _minmax(report.edge_scores)
    for (h, r, t), score, z in zip(report.edges, report.edge_scores, enorm):
        if r == report.n_relations:
            rel = "patient"
        else:
            rel = _name(g.edge_names[r]) if g is not None else str(r)
        out.add_edge(str(h), str(t), key=str(r), relation=rel, score=float(score),
                     width=float(0.5 + 2.5 * z), darkness=float(z),
                     top=int((h, r, t) in top_edges))
    return out


def _gray(z: float) -> str:
    level = int(round(255 * (1.0 - 0.85 * z)))
    return f"#{level:02x}{level:02x}{level:02x}"


def _attrs(d: dict) -> str:
    return ", ".join(f'{k}="{html.escape(str(v), quote=True)}"' for k, v in d.items())


def to_dot(graph: nx.MultiDiGraph) -> str:
    lines = [f'digraph "{html.escape(str(graph.graph.get("patient", "")), quote=True)}" {{']
    for n, d in graph.nodes(data=True):
        attrs = dict(d)
        attrs["width"] = f"{d['size']:.6f}"
        attrs["style"] = "filled"
        attrs["fillcolor"] = _gray(d["darkness"])
        attrs["shape"] = "doublecircle" if d["patient"] else ("box" if d["direct"] else "ellipse")
        lines.append(f'  "{n}" [{_attrs(attrs)}];')
    for u, v, k, d in graph.edges(keys=True, data=True):
        attrs = {"key": k, **d, "penwidth": f"{d['width']:.6f}", "color": _gray(d["darkness"])}
        lines.append(f'  "{u}" -> "{v}" [{_attrs(attrs)}];')
    lines.append("}")
    return "\n".join(lines) + "\n"


_DOT_NODE = re.compile(r'^\s*"([^"]*)"\s*\[(.*)\];\s*$')
_DOT_EDGE = re.compile(r'^\s*"([^"]*)"\s*->\s*"([^"]*)"\s*\[(.*)\];\s*$')
_DOT_ATTR = re.compile(r'(\w+)="([^"]*)"')


def read_dot(path: str | os.PathLike) -> nx.MultiDiGraph:
    """Parse DOT files written by :func:`export_graph`."""
    out = nx.MultiDiGraph()
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            m = _DOT_EDGE.match(line)
            if m:
                attrs = {k: html.unescape(v) for k, v in _DOT_ATTR.findall(m.group(3))}
                out.add_edge(m.group(1), m.group(2), key=attrs.pop("key"), **attrs)
                continue
            m = _DOT_NODE.match(line)
            if m:
                out.add_node(m.group(1), **{k: html.unescape(v)
                                           for k, v in _DOT_ATTR.findall(m.group(2))})
    return out


def export_graph(report: ImportanceReport, path: str | os.PathLike, fmt: str = "dot",
                 g: GlobalGraph | None = None, K: int | None = None) -> None:
    graph = annotated_graph(report, g, K)
    try:
        if fmt == "dot":
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(to_dot(graph))
        elif fmt == "graphml":
            nx.write_graphml(graph, path)
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
