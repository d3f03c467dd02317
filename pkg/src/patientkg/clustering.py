"""Cosine-distance agglomerative clustering of KG strings and the clustered
global graph built from it."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from .kg_ingest import ConceptKG, EmbeddingProvider, MedicalCode, normalize

DEFAULT_DELTA = 0.15
LINKAGES = ("average", "complete")


class ZeroVector(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class UnassignedString(KeyError):
    pass


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass
class ClusterAssignment:
    """A partition of ``n`` members; cluster ids follow first-member order."""

    labels: np.ndarray
    centroids: np.ndarray
    members: list[list[int]] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.members:
            members: list[list[int]] = [[] for _ in range(self.n_clusters)]
            for i, c in enumerate(self.labels):
                members[c].append(i)
            self.members = members

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def cluster_of(self, i: int) -> int:
        return int(self.labels[i])

    def as_sets(self) -> set[frozenset[int]]:
        return {frozenset(m) for m in self.members}


def _canonical_labels(raw: np.ndarray) -> np.ndarray:
    remap: dict[int, int] = {}
    out = np.empty(len(raw), dtype=np.int64)
    for i, c in enumerate(raw):
        out[i] = remap.setdefault(int(c), len(remap))
    return out


def _assignment(x: np.ndarray, labels: np.ndarray) -> ClusterAssignment:
    k = int(labels.max()) + 1
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, labels, x)
    counts = np.bincount(labels, minlength=k).reshape(-1, 1)
    return ClusterAssignment(labels, sums / counts)


def agglomerative_cluster(embeddings, delta: float = DEFAULT_DELTA,
                          linkage_method: str = "average") -> ClusterAssignment:
    """Merge clusters while the closest pair is within cosine distance ``delta``.

    Distances are ``1 - cosine``. Centroids are the arithmetic mean of the
    raw member embeddings. Cluster ids are assigned in order of each
    cluster's lowest member index.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInput("no embeddings to cluster")
    if not 0 < delta < 2:
        raise ValueError("delta must lie in (0, 2)")
    if linkage_method not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ZeroVector("zero embedding cannot be clustered by cosine distance")
    if x.shape[0] == 1:
        return _assignment(x, np.zeros(1, dtype=np.int64))
    unit = x / norms[:, None]
    d = np.clip(1.0 - _condensed_gram(unit), 0.0, 2.0)
    z = linkage(d, method=linkage_method)
    raw = fcluster(z, t=delta, criterion="distance")
    return _assignment(x, _canonical_labels(raw))


def _condensed_gram(unit: np.ndarray) -> np.ndarray:
    g = unit @ unit.T
    iu = np.triu_indices(unit.shape[0], k=1)
    return g[iu]


def naive_agglomerative(embeddings, delta: float = DEFAULT_DELTA,
                        linkage_method: str = "average") -> list[set[int]]:
    """Quadratic-per-merge reference implementation; returns the partition.

    Ties go to the pair with the lowest member indices.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    n = x.shape[0]
    unit = x / np.linalg.norm(x, axis=1, keepdims=True)
    dist = np.clip(1.0 - unit @ unit.T, 0.0, 2.0)
    clusters: list[list[int]] = [[i] for i in range(n)]
    while len(clusters) > 1:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                block = dist[np.ix_(clusters[a], clusters[b])]
                d = block.mean() if linkage_method == "average" else block.max()
                if best is None or d < best[0]:
                    best = (d, a, b)
        if best[0] > delta:
            break
        _, a, b = best
        clusters[a] = sorted(clusters[a] + clusters[b])
        del clusters[b]
    return [set(c) for c in clusters]


# ---------------------------------------------------------------- global graph

@dataclass
class GlobalGraph:
    """Clustered union of all concept KGs.

    ``node_embeddings`` is M x w and ``edge_embeddings`` is |C_E| x w; row
    ``m`` is the centroid of node cluster ``m``. ``edges`` holds unique
    ``(head_cluster, edge_type, tail_cluster)`` rows.
    """

    node_names: list[list[str]]
    edge_names: list[list[str]]
    node_embeddings: np.ndarray
    edge_embeddings: np.ndarray
    edges: np.ndarray
    code_nodes: dict[str, list[int]]
    code_edges: dict[str, list[int]]
    anchors: dict[str, int]
    codes: dict[str, MedicalCode]

    @property
    def n_nodes(self) -> int:
        return self.node_embeddings.shape[0]

    @property
    def n_edge_types(self) -> int:
        return self.edge_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.node_embeddings.shape[1]

    def key(self, code: MedicalCode | str) -> str:
        return code.id if isinstance(code, MedicalCode) else code

    def anchor(self, code: MedicalCode | str) -> int:
        return self.anchors[self.key(code)]

    def stats(self) -> dict[str, int]:
        return {"nodes": self.n_nodes, "edge_types": self.n_edge_types,
                "edges": int(len(self.edges)), "codes": len(self.anchors)}

    # persistence: JSON metadata next to a raw little-endian float64 block
    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        blob = path.with_suffix(path.suffix + ".f64")
        meta = {
            "version": 1,
            "dim": self.dim,
            "n_nodes": self.n_nodes,
            "n_edge_types": self.n_edge_types,
            "blob": blob.name,
            "node_names": self.node_names,
            "edge_names": self.edge_names,
            "edges": self.edges.tolist(),
            "codes": {k: c.category.value for k, c in sorted(self.codes.items())},
            "anchors": dict(sorted(self.anchors.items())),
            "code_nodes": dict(sorted(self.code_nodes.items())),
            "code_edges": dict(sorted(self.code_edges.items())),
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(meta, fh, sort_keys=True)
        block = np.concatenate([self.node_embeddings.ravel(), self.edge_embeddings.ravel()])
        blob.write_bytes(block.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GlobalGraph":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            meta = json.load(fh)
        raw = np.frombuffer((path.parent / meta["blob"]).read_bytes(), dtype="<f8").astype(np.float64)
        w, m, r = meta["dim"], meta["n_nodes"], meta["n_edge_types"]
        hv = raw[: m * w].reshape(m, w)
        hr = raw[m * w: m * w + r * w].reshape(r, w)
        return cls(
            node_names=meta["node_names"],
            edge_names=meta["edge_names"],
            node_embeddings=hv,
            edge_embeddings=hr,
            edges=np.asarray(meta["edges"], dtype=np.int64).reshape(-1, 3),
            code_nodes={k: list(v) for k, v in meta["code_nodes"].items()},
            code_edges={k: list(v) for k, v in meta["code_edges"].items()},
            anchors={k: int(v) for k, v in meta["anchors"].items()},
            codes={k: MedicalCode(k, v) for k, v in meta["codes"].items()},
        )


def node_vocabulary(concept_kgs: Sequence[ConceptKG]) -> list[str]:
    """Sorted entity strings, code names included even when never an endpoint."""
    vocab = {kg.code.entity for kg in concept_kgs}
    for kg in concept_kgs:
        vocab |= kg.entities()
    return sorted(vocab)


def relation_vocabulary(concept_kgs: Sequence[ConceptKG]) -> list[str]:
    vocab: set[str] = set()
    for kg in concept_kgs:
        vocab |= kg.relations()
    return sorted(vocab)


def build_global_graph(concept_kgs: Sequence[ConceptKG], node_vocab: Sequence[str],
                       node_clusters: ClusterAssignment, edge_vocab: Sequence[str],
                       edge_clusters: ClusterAssignment) -> GlobalGraph:
    """Map every raw triple through the node/edge clusterings.

    ``node_vocab[i]`` is member ``i`` of ``node_clusters`` and likewise for
    edges. Node/edge embeddings are the cluster centroids.
    """
    node_id = {normalize(s): node_clusters.cluster_of(i) for i, s in enumerate(node_vocab)}
    edge_id = {normalize(s): edge_clusters.cluster_of(i) for i, s in enumerate(edge_vocab)}

    def lookup(table, s):
        try:
            return table[s]
        except KeyError:
            raise UnassignedString(s) from None

    edge_index: dict[tuple[int, int, int], int] = {}
    code_nodes: dict[str, list[int]] = {}
    code_edges: dict[str, list[int]] = {}
    anchors: dict[str, int] = {}
    codes: dict[str, MedicalCode] = {}
    for kg in concept_kgs:
        anchor = lookup(node_id, kg.code.entity)
        nodes = {anchor}
        eids = set()
        for t in kg.sorted_triples():
            key = (lookup(node_id, t.head), lookup(edge_id, t.relation), lookup(node_id, t.tail))
            eid = edge_index.setdefault(key, len(edge_index))
            eids.add(eid)
            nodes.update((key[0], key[2]))
        anchors[kg.code.id] = anchor
        codes[kg.code.id] = kg.code
        code_nodes[kg.code.id] = sorted(nodes)
        code_edges[kg.code.id] = sorted(eids)

    node_names = [[node_vocab[i] for i in members] for members in node_clusters.members]
    edge_names = [[edge_vocab[i] for i in members] for members in edge_clusters.members]
    edges = np.array(list(edge_index), dtype=np.int64).reshape(-1, 3)
    return GlobalGraph(node_names, edge_names, node_clusters.centroids.copy(),
                       edge_clusters.centroids.copy(), edges, code_nodes, code_edges,
                       anchors, codes)


def cluster_concept_kgs(concept_kgs: Sequence[ConceptKG], provider: EmbeddingProvider,
                        delta: float = DEFAULT_DELTA, linkage_method: str = "average") -> GlobalGraph:
    """Vocabulary extraction, both clusterings and graph construction in one go."""
    nodes = node_vocabulary(concept_kgs)
    rels = relation_vocabulary(concept_kgs)
    node_clusters = agglomerative_cluster(provider.matrix(nodes), delta, linkage_method)
    if rels:
        edge_clusters = agglomerative_cluster(provider.matrix(rels), delta, linkage_method)
    else:
        edge_clusters = ClusterAssignment(np.zeros(0, dtype=np.int64), np.zeros((0, provider.dim)), [])
    return build_global_graph(concept_kgs, nodes, node_clusters, rels, edge_clusters)
