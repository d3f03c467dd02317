"""Bi-attention temporal GNN over patient visit-subgraphs.

All math runs on :mod:`patientkg.tensor` in row-vector convention: node
embeddings are rows, so a linear map is ``h @ W`` with ``W`` of shape
``in x out``.

Node slots: the attention space has ``M + 1`` slots, the ``M`` global
cluster nodes plus one slot (index ``M``) shared by every patient node.
Edge types: ``|C_E| + 1`` with the last type reserved for patient edges,
whose input embedding is the zero vector.
"""
from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .clustering import GlobalGraph, ZeroVector
from .patient_graph import EmptyDirectSet, PatientGraph
from .tensor import Tensor

CHECKPOINT_VERSION = 1
_MAGIC = b"PKGCKPT1"


class LabelOutOfRange(ValueError):
    pass


class EmptyVisit(ValueError):
    pass


class Mode(str, Enum):
    GRAPH = "graph"
    NODE = "node"
    JOINT = "joint"


class TaskKind(str, Enum):
    MORTALITY = "mortality"
    READMISSION = "readmission"
    LOS = "los"
    DRUGREC = "drugrec"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind
    out_size: int
    loss: str
    term: str

    @classmethod
    def for_task(cls, kind: TaskKind | str, n_drugs: int | None = None) -> "TaskSpec":
        kind = TaskKind(kind)
        if kind is TaskKind.MORTALITY:
            return cls(kind, 1, "bce", "death")
        if kind is TaskKind.READMISSION:
            return cls(kind, 1, "bce", "readmission")
        if kind is TaskKind.LOS:
            return cls(kind, LOS_CLASSES, "ce", "length of stay")
        if not n_drugs:
            raise ValueError("drug recommendation needs the drug vocabulary size")
        return cls(kind, n_drugs, "bce", "drug")


LOS_CLASSES = 10
READMISSION_WINDOW_DAYS = 15.0

# (decay rate, layers) per task
TASK_DEFAULTS = {
    TaskKind.MORTALITY: (0.01, 1),
    TaskKind.READMISSION: (0.01, 2),
    TaskKind.LOS: (0.03, 2),
    TaskKind.DRUGREC: (0.03, 3),
}


@dataclass
class ModelConfig:
    mode: Mode = Mode.JOINT
    hidden: int = 128
    layers: int = 2
    gamma: float = 0.01
    max_visits: int = 1
    use_alpha: bool = True
    use_beta: bool = True
    use_edge_weights: bool = True

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.hidden < 1 or self.layers < 1 or self.max_visits < 1:
            raise ValueError("hidden, layers and max_visits must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    @classmethod
    def for_task(cls, kind: TaskKind | str, **overrides) -> "ModelConfig":
        gamma, layers = TASK_DEFAULTS[TaskKind(kind)]
        base = {"gamma": gamma, "layers": layers}
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        return d


# ---------------------------------------------------------------- primitives

def decay_coefficients(n_visits: int, n_rows: int, gamma: float) -> np.ndarray:
    """``exp(-gamma (J - j))`` for visits ``j <= J``, zero for padded rows."""
    if not 1 <= n_visits <= n_rows:
        raise ValueError("need 1 <= J <= N")
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    lam = np.zeros(n_rows)
    j = np.arange(1, n_visits + 1)
    lam[:n_visits] = np.exp(-gamma * (n_visits - j))
    return lam


def init_node_attention(node_embeddings: np.ndarray, task_embedding: np.ndarray) -> np.ndarray:
    """Min-max normalized cosine similarity of every node to the task term.

    A constant similarity vector maps to all ones.
    """
    h = np.asarray(node_embeddings, dtype=np.float64)
    w = np.asarray(task_embedding, dtype=np.float64)
    hn = np.linalg.norm(h, axis=1)
    wn = np.linalg.norm(w)
    if wn == 0 or np.any(hn == 0):
        raise ZeroVector("attention init needs non-zero embeddings")
    sim = (h @ w) / (hn * wn)
    lo, hi = sim.min(), sim.max()
    if hi == lo:
        return np.ones_like(sim)
    return (sim - lo) / (hi - lo)


def reduce_embeddings(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map from word-embedding width to hidden width."""
    if x.shape[1] != weight.shape[0]:
        raise T.ShapeMismatch(f"embedding width {x.shape[1]} vs weight {weight.shape}")
    return x @ weight + bias


def compute_attention(multihot: np.ndarray, lam: np.ndarray, row_pos: np.ndarray,
                      w_alpha: Tensor, b_alpha: Tensor, w_beta: Tensor, b_beta: Tensor,
                      use_alpha: bool = True, use_beta: bool = True) -> tuple[Tensor, Tensor]:
    """Node attention (rows x slots) and visit attention (rows x 1).

    Node attention is a softmax over the slots present in each visit.
    Visit attention is ``lam * tanh(g . w_beta + b_beta[pos])``; rows with
    ``lam = 0`` (padding) get zero.
    """
    g = np.asarray(multihot, dtype=np.float64)
    mask = g > 0
    counts = mask.sum(axis=1, keepdims=True)
    lam_col = np.asarray(lam, dtype=np.float64).reshape(-1, 1)
    if np.any((counts[:, 0] == 0) & (lam_col[:, 0] > 0)):
        raise EmptyVisit("a real visit has no nodes")
    gt = Tensor(g)
    if use_alpha:
        logits = gt @ T.transpose(w_alpha) + b_alpha
        alpha = T.masked_softmax(logits, mask)
    else:
        alpha = Tensor(np.where(mask, 1.0, 0.0) / np.where(counts > 0, counts, 1))
    if use_beta:
        pre = gt @ w_beta + T.take_rows(b_beta, row_pos)
        beta = T.mul(Tensor(lam_col), T.tanh(pre))
    else:
        beta = Tensor(lam_col)
    return alpha, beta


def bat_conv(h: Tensor, edge_h: Tensor, pair_weights: Tensor, pair_tgt, pair_src,
             edge_counts: sp.spmatrix | None, edge_weight: Tensor, weight: Tensor,
             bias: Tensor) -> Tensor:
    """One bi-attention convolution.

    ``pair_weights[p]`` (= alpha * beta of the source instance) scales
    ``h[pair_src[p]]`` into ``pair_tgt[p]``; self terms are pairs with
    ``tgt == src``. ``edge_counts[u, r]`` counts edges of type ``r``
    incident to node ``u`` and each adds ``edge_weight[r] * edge_h[r]``.
    """
    agg = T.weighted_spmm(pair_weights, pair_tgt, pair_src, h.shape[0], h)
    if edge_counts is not None and edge_counts.nnz:
        agg = agg + T.spmm(edge_counts, T.mul(edge_weight, edge_h))
    return T.relu(agg @ weight + bias)


# ---------------------------------------------------------------- batching

@dataclass
class GraphStructure:
    """Index arrays describing one patient graph in local node ids.

    Local node ``n_local - 1`` is the patient node.
    """

    patient_id: str
    node_ids: np.ndarray          # global id per local node, -1 for the patient node
    n_rows: int
    n_visits: int
    row_slots: list[np.ndarray]   # attention slots present per row
    inst_row: np.ndarray
    inst_slot: np.ndarray
    inst_node: np.ndarray
    pair_tgt: np.ndarray
    pair_src: np.ndarray
    pair_inst: np.ndarray
    edge_u: np.ndarray
    edge_r: np.ndarray
    direct_local: np.ndarray
    patient_embedding: np.ndarray
    edge_list: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def n_local(self) -> int:
        return self.node_ids.size


def build_structure(pg: PatientGraph, g: GlobalGraph) -> GraphStructure:
    m = g.n_nodes
    r_patient = g.n_edge_types
    nodes = pg.nodes() if pg.n_visits else np.zeros(0, np.int64)
    local = {int(n): i for i, n in enumerate(nodes)}
    p_local = len(nodes)
    node_ids = np.concatenate([nodes, [-1]]).astype(np.int64)

    row_slots, inst_row, inst_slot, inst_node = [], [], [], []
    pair_tgt, pair_src, pair_inst = [], [], []
    edge_u, edge_r = [], []
    edge_list: set[tuple[int, int, int]] = set()
    for j in range(pg.n_visits):
        vnodes = pg.visit_nodes[j]
        inst_of: dict[int, int] = {}
        for n in vnodes:
            inst_of[local[int(n)]] = len(inst_row)
            inst_row.append(j)
            inst_slot.append(int(n))
            inst_node.append(local[int(n)])
        inst_of[p_local] = len(inst_row)
        inst_row.append(j)
        inst_slot.append(m)
        inst_node.append(p_local)
        row_slots.append(np.concatenate([vnodes, [m]]).astype(np.int64))

        for u, i in inst_of.items():
            pair_tgt.append(u)
            pair_src.append(u)
            pair_inst.append(i)
        neighbours: set[tuple[int, int]] = set()
        for eid in pg.visit_edges[j]:
            h, r, t = (int(x) for x in g.edges[eid])
            uh, ut = local[h], local[t]
            edge_list.add((uh, r, ut))
            if uh == ut:
                edge_u.append(uh)
                edge_r.append(r)
                continue
            neighbours.add((uh, ut))
            neighbours.add((ut, uh))
            edge_u.extend((uh, ut))
            edge_r.extend((r, r))
        for a in pg.visit_anchors[j]:
            ua = local[int(a)]
            edge_list.add((p_local, r_patient, ua))
            neighbours.add((ua, p_local))
            neighbours.add((p_local, ua))
            edge_u.extend((ua, p_local))
            edge_r.extend((r_patient, r_patient))
        for tgt, src in sorted(neighbours):
            pair_tgt.append(tgt)
            pair_src.append(src)
            pair_inst.append(inst_of[src])

    if pg.patient_embedding is not None:
        pemb = np.asarray(pg.patient_embedding, dtype=np.float64)
    else:
        pemb = np.zeros(g.dim)
    direct_local = np.array([local[int(a)] for a in pg.direct], dtype=np.int64)
    as_i = lambda xs: np.asarray(xs, dtype=np.int64)
    return GraphStructure(pg.patient_id, node_ids, pg.n_rows, pg.n_visits, row_slots,
                          as_i(inst_row), as_i(inst_slot), as_i(inst_node), as_i(pair_tgt),
                          as_i(pair_src), as_i(pair_inst), as_i(edge_u), as_i(edge_r),
                          direct_local, pemb, sorted(edge_list))


@dataclass
class GraphBatch:
    """Several patient graphs stacked into one disconnected graph."""

    structures: list[GraphStructure]
    n_slots: int
    n_edge_types: int
    x0: np.ndarray
    multihot: np.ndarray
    row_pos: np.ndarray
    row_sample: np.ndarray
    row_visits: np.ndarray
    inst_row: np.ndarray
    inst_slot: np.ndarray
    inst_node: np.ndarray
    pair_tgt: np.ndarray
    pair_src: np.ndarray
    pair_inst: np.ndarray
    edge_counts: sp.csr_matrix
    readout_graph: sp.csr_matrix
    readout_direct: sp.csr_matrix
    node_offsets: np.ndarray
    row_offsets: np.ndarray
    has_direct: np.ndarray

    @property
    def size(self) -> int:
        return len(self.structures)

    @property
    def n_nodes(self) -> int:
        return self.x0.shape[0]


def collate(structures: Sequence[GraphStructure], g: GlobalGraph) -> GraphBatch:
    m1 = g.n_nodes + 1
    r1 = g.n_edge_types + 1
    node_off = np.cumsum([0] + [s.n_local for s in structures])
    row_off = np.cumsum([0] + [s.n_rows for s in structures])
    inst_off = np.cumsum([0] + [s.inst_row.size for s in structures])
    n_nodes, n_rows = int(node_off[-1]), int(row_off[-1])

    x0 = np.zeros((n_nodes, g.dim))
    multihot = np.zeros((n_rows, m1))
    row_pos = np.zeros(n_rows, dtype=np.int64)
    row_sample = np.zeros(n_rows, dtype=np.int64)
    row_visits = np.zeros(n_rows, dtype=np.int64)
    cat = lambda key, off: np.concatenate([getattr(s, key) + o for s, o in zip(structures, off)])
    rg_rows, rg_cols, rg_vals = [], [], []
    rd_rows, rd_cols, rd_vals = [], [], []
    has_direct = np.zeros(len(structures), dtype=bool)
    for b, s in enumerate(structures):
        lo = node_off[b]
        glob = s.node_ids[:-1]
        x0[lo: lo + glob.size] = g.node_embeddings[glob]
        x0[lo + glob.size] = s.patient_embedding
        r0 = row_off[b]
        for j, slots in enumerate(s.row_slots):
            multihot[r0 + j, slots] = 1.0
        row_pos[r0: r0 + s.n_rows] = np.arange(s.n_rows)
        row_sample[r0: r0 + s.n_rows] = b
        row_visits[r0: r0 + s.n_rows] = s.n_visits
        counts = np.bincount(s.inst_node, minlength=s.n_local).astype(np.float64)
        total = counts.sum()
        nz = np.nonzero(counts)[0]
        rg_rows.extend([b] * nz.size)
        rg_cols.extend((nz + lo).tolist())
        rg_vals.extend((counts[nz] / total).tolist())
        if s.direct_local.size:
            has_direct[b] = True
            dcounts = counts[s.direct_local]
            rd_rows.extend([b] * s.direct_local.size)
            rd_cols.extend((s.direct_local + lo).tolist())
            rd_vals.extend((dcounts / dcounts.sum()).tolist())

    edge_u = cat("edge_u", node_off)
    edge_r = np.concatenate([s.edge_r for s in structures])
    edge_counts = sp.csr_matrix((np.ones(edge_u.size), (edge_u, edge_r)), shape=(n_nodes, r1))
    edge_counts.sum_duplicates()
    b_count = len(structures)
    readout_graph = sp.csr_matrix((rg_vals, (rg_rows, rg_cols)), shape=(b_count, n_nodes))
    readout_direct = sp.csr_matrix((rd_vals, (rd_rows, rd_cols)), shape=(b_count, n_nodes))
    return GraphBatch(
        list(structures), m1, r1, x0, multihot, row_pos, row_sample, row_visits,
        cat("inst_row", row_off), np.concatenate([s.inst_slot for s in structures]),
        cat("inst_node", node_off), cat("pair_tgt", node_off), cat("pair_src", node_off),
        cat("pair_inst", inst_off), edge_counts, readout_graph, readout_direct,
        node_off, row_off, has_direct)


# ---------------------------------------------------------------- model

@dataclass
class ForwardTrace:
    """Attention values and edge weights from the most recent forward pass."""

    batch: GraphBatch
    alpha: np.ndarray
    beta: np.ndarray
    edge_weights: list[np.ndarray]


class BatModel:
    """Parameters plus forward pass; ``params`` keeps the declared order."""

    def __init__(self, config: ModelConfig, task: TaskSpec, n_nodes: int, n_edge_types: int,
                 dim: int, seed: int = 0):
        self.config = config
        self.task = task
        self.n_nodes = n_nodes
        self.n_edge_types = n_edge_types
        self.dim = dim
        self.seed = seed
        self.trace: ForwardTrace | None = None
        self._edge_h0: np.ndarray | None = None
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init_params(np.random.default_rng(seed))

    @classmethod
    def for_graph(cls, g: GlobalGraph, config: ModelConfig, task: TaskSpec, seed: int = 0) -> "BatModel":
        model = cls(config, task, g.n_nodes, g.n_edge_types, g.dim, seed)
        model.bind(g)
        return model

    def bind(self, g: GlobalGraph) -> None:
        """Attach the graph's edge embeddings (plus the zero patient-edge row)."""
        if (g.n_nodes, g.n_edge_types, g.dim) != (self.n_nodes, self.n_edge_types, self.dim):
            raise T.ShapeMismatch("global graph does not match model dimensions")
        self._edge_h0 = np.vstack([g.edge_embeddings, np.zeros((1, g.dim))])

    def _init_params(self, rng: np.random.Generator) -> None:
        c, w, q = self.config, self.dim, self.config.hidden
        s1, r1 = self.n_nodes + 1, self.n_edge_types + 1

        def glorot(n_in, n_out):
            return rng.normal(0.0, math.sqrt(2.0 / (n_in + n_out)), size=(n_in, n_out))

        p = self.params
        p["W_v"] = glorot(w, q)
        p["b_v"] = np.zeros((1, q))
        p["W_r"] = glorot(w, q)
        p["b_r"] = np.zeros((1, q))
        p["W_alpha"] = np.eye(s1)
        p["b_alpha"] = np.zeros((1, s1))
        p["w_beta"] = rng.normal(0.0, 0.1, size=(s1, 1))
        p["b_beta"] = np.zeros((c.max_visits, 1))
        for layer in range(1, c.layers + 1):
            p[f"W_{layer}"] = glorot(q, q)
            p[f"b_{layer}"] = np.zeros((1, q))
            p[f"w_R_{layer}"] = np.ones((r1, 1))
        d_in = 2 * q if c.mode is Mode.JOINT else q
        p["head_W1"] = glorot(d_in, q)
        p["head_b1"] = np.zeros((1, q))
        p["head_W2"] = glorot(q, self.task.out_size)
        p["head_b2"] = np.zeros((1, self.task.out_size))
        for name, value in list(p.items()):
            p[name] = Tensor(value, requires_grad=True, name=name)

    def init_attention(self, node_embeddings: np.ndarray, task_embedding: np.ndarray) -> None:
        """Diagonal node-attention init from task-term similarity.

        The shared patient-node slot takes the mean of the node weights.
        """
        weights = init_node_attention(node_embeddings, task_embedding)
        diag = np.concatenate([weights, [weights.mean()]])
        self.params["W_alpha"].data = np.diag(diag)
        self.params["b_alpha"].data = np.zeros_like(self.params["b_alpha"].data)

    # -------------------------------------------------------------- forward

    def edge_weight(self, layer: int) -> Tensor:
        if self.config.use_edge_weights:
            return self.params[f"w_R_{layer}"]
        return Tensor(np.ones((self.n_edge_types + 1, 1)))

    def embed(self, batch: GraphBatch) -> Tensor:
        """Final-layer node embeddings for every local node in the batch."""
        if self._edge_h0 is None:
            raise RuntimeError("model is not bound to a global graph")
        c, p = self.config, self.params
        if batch.row_pos.size and batch.row_pos.max() >= c.max_visits:
            raise T.ShapeMismatch(f"batch has more than {c.max_visits} visit rows")
        lam = np.zeros(batch.multihot.shape[0])
        for s, off in zip(batch.structures, batch.row_offsets):
            lam[off: off + s.n_rows] = decay_coefficients(s.n_visits, s.n_rows, c.gamma)
        alpha, beta = compute_attention(batch.multihot, lam, batch.row_pos, p["W_alpha"],
                                        p["b_alpha"], p["w_beta"], p["b_beta"],
                                        c.use_alpha, c.use_beta)
        inst_w = T.mul(T.gather(alpha, batch.inst_row, batch.inst_slot),
                       T.take_rows(beta, batch.inst_row))
        pair_w = T.take_rows(inst_w, batch.pair_inst)
        h = reduce_embeddings(Tensor(batch.x0), p["W_v"], p["b_v"])
        edge_h = reduce_embeddings(Tensor(self._edge_h0), p["W_r"], p["b_r"])
        weights = []
        for layer in range(1, c.layers + 1):
            ew = self.edge_weight(layer)
            weights.append(ew.data[:, 0].copy())
            h = bat_conv(h, edge_h, pair_w, batch.pair_tgt, batch.pair_src, batch.edge_counts,
                         ew, p[f"W_{layer}"], p[f"b_{layer}"])
        self.trace = ForwardTrace(batch, alpha.data.copy(), beta.data[:, 0].copy(), weights)
        return h

    def readout(self, h: Tensor, batch: GraphBatch) -> Tensor:
        return readout(h, batch, self.config.mode, self.params)

    def forward(self, batch: GraphBatch) -> Tensor:
        return self.readout(self.embed(batch), batch)

    __call__ = forward

    def predict(self, batch: GraphBatch) -> np.ndarray:
        """Probabilities: sigmoid for BCE tasks, softmax for LOS."""
        z = self.forward(batch).data
        if self.task.loss == "ce":
            e = np.exp(z - z.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-z))

    # -------------------------------------------------------------- state

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if self.params[k].shape != np.shape(v):
                raise T.ShapeMismatch(f"{k}: {np.shape(v)} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def header(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_json(),
            "task": {"kind": self.task.kind.value, "out_size": self.task.out_size,
                     "loss": self.task.loss, "term": self.task.term},
            "dims": {"n_nodes": self.n_nodes, "n_edge_types": self.n_edge_types, "dim": self.dim},
            "seed": self.seed,
            "params": [[k, list(v.shape)] for k, v in self.params.items()],
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        header = self.header()
        if extra:
            header["extra"] = extra
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(len(raw).to_bytes(8, "little"))
            fh.write(raw)
            for v in self.params.values():
                fh.write(v.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> tuple["BatModel", dict]:
        blob = Path(path).read_bytes()
        if blob[:8] != _MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        n = int.from_bytes(blob[8:16], "little")
        header = json.loads(blob[16:16 + n].decode("utf-8"))
        t = header["task"]
        task = TaskSpec(TaskKind(t["kind"]), t["out_size"], t["loss"], t["term"])
        dims = header["dims"]
        model = cls(ModelConfig(**header["config"]), task, dims["n_nodes"], dims["n_edge_types"],
                    dims["dim"], header["seed"])
        offset = 16 + n
        state = {}
        for name, shape in header["params"]:
            size = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
            state[name] = arr.reshape(shape).astype(np.float64)
            offset += size * 8
        model.load_state(state)
        return model, header


def readout(h: Tensor, batch: GraphBatch, mode: Mode | str, params: dict[str, Tensor]) -> Tensor:
    """Graph mean, direct-node mean, or both concatenated, then the head MLP."""
    mode = Mode(mode)
    parts = []
    if mode in (Mode.GRAPH, Mode.JOINT):
        parts.append(T.spmm(batch.readout_graph, h))
    if mode in (Mode.NODE, Mode.JOINT):
        if not batch.has_direct.all():
            raise EmptyDirectSet("a patient in the batch has no direct EHR nodes")
        parts.append(T.spmm(batch.readout_direct, h))
    x = parts[0] if len(parts) == 1 else T.concat_cols(parts)
    hidden = T.relu(x @ params["head_W1"] + params["head_b1"])
    return hidden @ params["head_W2"] + params["head_b2"]


# ---------------------------------------------------------------- losses

def bce_loss(z: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.float64).reshape(z.shape)
    if np.any((y != 0) & (y != 1)):
        raise LabelOutOfRange("binary labels must be 0 or 1")
    pos = T.log(T.sigmoid(z))
    neg = T.log(T.sigmoid(-z))
    ll = T.mul(Tensor(y), pos) + T.mul(Tensor(1.0 - y), neg)
    return -T.mean_all(ll)


def ce_loss(z: Tensor, y) -> Tensor:
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size != z.shape[0]:
        raise T.ShapeMismatch("one class label per row expected")
    if np.any((y < 0) | (y >= z.shape[1])):
        raise LabelOutOfRange(f"class labels must lie in [0, {z.shape[1]})")
    logp = T.log(T.softmax(z))
    picked = T.gather(logp, np.arange(y.size), y)
    return -T.mean_all(picked)


def loss(z: Tensor, y, task: TaskSpec) -> Tensor:
    if task.loss == "ce":
        return ce_loss(z, y)
    return bce_loss(z, y)
