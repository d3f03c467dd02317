import math

import numpy as np
import pytest

from patientkg import tensor as T
from patientkg.clustering import ZeroVector
from patientkg.model import (BatModel, EmptyVisit, LabelOutOfRange, ModelConfig, TaskKind,
                             TaskSpec, bat_conv, build_structure, ce_loss, bce_loss, collate,
                             compute_attention, decay_coefficients, init_node_attention,
                             reduce_embeddings)
from patientkg.patient_graph import EmptyDirectSet, Patient, Visit, compose_patient_graph
from patientkg.tensor import Tensor

from conftest import batch_for, random_patient, tiny_model, tiny_world


# ---------------------------------------------------------------- oracles

def layer_oracle(pg, g, h, alpha, beta, edge_h, w_r, W, b):
    """Plain-loop aggregation over visits; ``h`` maps global id (or "P") to a row."""
    agg = {k: np.zeros_like(next(iter(h.values()))) for k in h}
    for j in range(pg.n_visits):
        nodes = [int(n) for n in pg.visit_nodes[j]] + ["P"]
        for k in nodes:
            agg[k] = agg[k] + alpha(j, k) * beta[j] * h[k]
        pairs = set()
        for eid in pg.visit_edges[j]:
            hd, r, tl = (int(x) for x in g.edges[eid])
            agg[hd] = agg[hd] + w_r[r] * edge_h[r]
            if hd != tl:
                agg[tl] = agg[tl] + w_r[r] * edge_h[r]
                pairs |= {(hd, tl), (tl, hd)}
        for a in pg.visit_anchors[j]:
            a = int(a)
            for k in (a, "P"):
                agg[k] = agg[k] + w_r[-1] * edge_h[-1]
            pairs |= {(a, "P"), ("P", a)}
        for k, k2 in pairs:
            agg[k] = agg[k] + alpha(j, k2) * beta[j] * h[k2]
    return {k: np.maximum(v @ W + b, 0.0) for k, v in agg.items()}


def local_rows(structure, h, offset=0):
    return {("P" if gid < 0 else int(gid)): h[offset + i] for i, gid in enumerate(structure.node_ids)}


# ---------------------------------------------------------------- embedding reduction

def test_reduce_embeddings_examples():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    b0 = rng.normal(size=(1, 3))
    out = reduce_embeddings(Tensor(x), Tensor(np.zeros((4, 3))), Tensor(b0)).data
    assert np.array_equal(out, np.repeat(b0, 5, axis=0))
    assert np.array_equal(reduce_embeddings(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros((1, 4)))).data, x)
    W, b = rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    oracle = np.zeros((5, 3))
    for i in range(5):
        for k in range(3):
            oracle[i, k] = b[0, k] + sum(x[i, m] * W[m, k] for m in range(4))
    assert np.max(np.abs(reduce_embeddings(Tensor(x), Tensor(W), Tensor(b)).data - oracle)) < 1e-12
    with pytest.raises(T.ShapeMismatch):
        reduce_embeddings(Tensor(x), Tensor(np.zeros((3, 3))), Tensor(b))


# ---------------------------------------------------------------- decay / init

def test_decay_examples():
    assert decay_coefficients(1, 1, 0.7).tolist() == [1.0]
    got = decay_coefficients(3, 5, 0.01)
    assert np.allclose(got, [0.9801986733, 0.9900498337, 1.0, 0.0, 0.0], atol=1e-10, rtol=0)
    assert decay_coefficients(3, 5, 0.0).tolist() == [1, 1, 1, 0, 0]
    lam = decay_coefficients(6, 6, 0.2)
    assert np.all(np.diff(lam) > 0) and lam[-1] == 1.0


def test_init_attention_examples():
    task = np.array([1.0, 0.0])
    same = np.tile(task, (3, 1))
    assert init_node_attention(same, task).tolist() == [1.0, 1.0, 1.0]
    nodes = np.array([[0.2, math.sqrt(1 - 0.04)], [0.8, math.sqrt(1 - 0.64)]])
    assert np.allclose(init_node_attention(nodes, task), [0.0, 1.0], atol=1e-12)
    rng = np.random.default_rng(0)
    h = rng.normal(size=(10, 6))
    t = rng.normal(size=6)
    raw = [h[i] @ t / np.linalg.norm(h[i]) / np.linalg.norm(t) for i in range(10)]
    w = init_node_attention(h, t)
    assert np.argmax(w) == np.argmax(raw)
    assert w.min() == 0.0 and w.max() == 1.0
    assert np.allclose(init_node_attention(3.5 * h, t), w, atol=1e-12)
    with pytest.raises(ZeroVector):
        init_node_attention(np.zeros((2, 6)), t)


def test_model_attention_init_sets_diagonal():
    codes, g, provider = tiny_world()
    model = tiny_model(g)
    task = provider.get("death")
    model.init_attention(g.node_embeddings, task)
    d = np.diag(model.params["W_alpha"].data)
    w = init_node_attention(g.node_embeddings, task)
    assert np.array_equal(d[:-1], w) and d[-1] == pytest.approx(w.mean())
    off = model.params["W_alpha"].data - np.diag(d)
    assert np.all(off == 0) and np.all(model.params["b_alpha"].data == 0)


# ---------------------------------------------------------------- attention

def attention_params(m1, n_rows, rng):
    return (Tensor(rng.normal(size=(m1, m1))), Tensor(rng.normal(size=(1, m1))),
            Tensor(rng.normal(size=(m1, 1))), Tensor(rng.normal(size=(n_rows, 1))))


def test_attention_properties():
    rng = np.random.default_rng(0)
    g = np.array([[1, 0, 0, 0], [0, 1, 1, 1], [0, 0, 0, 0]], dtype=float)
    lam = decay_coefficients(2, 3, 0.1)
    alpha, beta = compute_attention(g, lam, np.arange(3), *attention_params(4, 3, rng))
    assert alpha.data[0, 0] == 1.0
    assert np.allclose(alpha.data[:2].sum(axis=1), 1.0, atol=1e-12)
    assert np.all(alpha.data[g == 0] == 0)
    assert beta.data[2, 0] == 0.0
    assert np.all(np.abs(beta.data[:, 0]) <= lam + 1e-15)


def test_attention_toggles():
    rng = np.random.default_rng(1)
    g = np.array([[1, 1, 0], [0, 1, 1]], dtype=float)
    lam = decay_coefficients(2, 2, 0.3)
    alpha, beta = compute_attention(g, lam, np.arange(2), *attention_params(3, 2, rng),
                                    use_alpha=False, use_beta=False)
    assert np.array_equal(alpha.data, g / 2)
    assert np.array_equal(beta.data[:, 0], lam)


def test_empty_real_visit():
    rng = np.random.default_rng(2)
    with pytest.raises(EmptyVisit):
        compute_attention(np.zeros((1, 3)), np.ones(1), np.arange(1), *attention_params(3, 1, rng))


# ---------------------------------------------------------------- convolution

def test_layer_identity_is_relu():
    h = np.array([[0.5, -1.25, 3.0, 0.0, 2.0]])
    out = bat_conv(Tensor(h), Tensor(np.zeros((1, 5))), Tensor([[1.0]]), np.array([0]),
                   np.array([0]), None, Tensor([[1.0]]), Tensor(np.eye(5)), Tensor(np.zeros((1, 5))))
    assert np.array_equal(out.data, np.maximum(h, 0.0))


def test_isolated_nodes_do_not_interact():
    rng = np.random.default_rng(3)
    h = rng.normal(size=(2, 4))
    W, b = Tensor(rng.normal(size=(4, 4))), Tensor(np.zeros((1, 4)))
    args = (Tensor([[0.7], [0.4]]), np.array([0, 1]), np.array([0, 1]), None, Tensor([[1.0]]), W, b)
    base = bat_conv(Tensor(h), Tensor(np.zeros((1, 4))), *args).data
    h2 = h.copy()
    h2[1] += 10.0
    moved = bat_conv(Tensor(h2), Tensor(np.zeros((1, 4))), *args).data
    assert np.array_equal(base[0], moved[0])


def triangle_world():
    from patientkg.clustering import cluster_concept_kgs
    from patientkg.kg_ingest import Category, ConceptKG, EmbeddingProvider, MedicalCode, Triple
    c = MedicalCode("a", Category.CONDITION)
    kg = ConceptKG(c, frozenset({Triple("a", "r", "b"), Triple("b", "s", "c"), Triple("c", "r", "a")}))
    g = cluster_concept_kgs([kg], EmbeddingProvider({}, dim=6, seed=1), 0.01)
    assert g.n_nodes == 3
    return c, g


def model_vs_oracle(g, patients, model, n_rows):
    batch = batch_for(patients, g, n_rows)
    h = model.embed(batch).data
    p = model.params
    edge_h = model._edge_h0 @ p["W_r"].data + p["b_r"].data
    w_r = p["w_R_1"].data[:, 0] if model.config.use_edge_weights else np.ones(g.n_edge_types + 1)
    worst = 0.0
    for b, s in enumerate(batch.structures):
        pg = compose_patient_graph(patients[b], g, n_rows)
        x0 = {("P" if gid < 0 else int(gid)): row
              for gid, row in zip(s.node_ids, batch.x0[batch.node_offsets[b]:])}
        h0 = {k: v @ p["W_v"].data + p["b_v"].data[0] for k, v in x0.items()}
        r0 = batch.row_offsets[b]
        alpha_rows = model.trace.alpha[r0: r0 + s.n_rows]
        beta = model.trace.beta[r0: r0 + s.n_rows]
        slot = lambda k: g.n_nodes if k == "P" else k
        alpha = lambda j, k: alpha_rows[j, slot(k)]
        expect = layer_oracle(pg, g, h0, alpha, beta, edge_h, w_r, p["W_1"].data, p["b_1"].data[0])
        got = local_rows(s, h, batch.node_offsets[b])
        worst = max(worst, max(np.max(np.abs(got[k] - expect[k])) for k in expect))
    return worst


def test_triangle_matches_double_loop_oracle():
    c, g = triangle_world()
    model = tiny_model(g, layers=1, max_visits=2)
    model.params["w_R_1"].data = np.array([[0.3], [-1.2], [0.8]])
    patients = [Patient("p", [Visit(0, 1, [c]), Visit(3, 4, [c])])]
    assert model_vs_oracle(g, patients, model, 2) < 1e-12


def test_random_graphs_match_oracle():
    codes, g, _ = tiny_world(seed=5)
    rng = np.random.default_rng(5)
    model = tiny_model(g, layers=1, max_visits=3)
    model.params["w_R_1"].data = rng.normal(size=(g.n_edge_types + 1, 1))
    patients = [random_patient(rng, codes, f"p{i}", int(rng.integers(1, 4))) for i in range(6)]
    assert model_vs_oracle(g, patients, model, 3) < 1e-12


def test_all_toggles_off_is_plain_mean_aggregation():
    codes, g, _ = tiny_world(seed=6)
    rng = np.random.default_rng(6)
    model = tiny_model(g, layers=1, max_visits=3, use_alpha=False, use_beta=False,
                       use_edge_weights=False)
    model.config.gamma = 0.0
    patients = [random_patient(rng, codes, f"p{i}", int(rng.integers(1, 4))) for i in range(5)]
    batch = batch_for(patients, g, 3)
    h = model.embed(batch).data
    p = model.params
    edge_h = model._edge_h0 @ p["W_r"].data + p["b_r"].data
    for b, s in enumerate(batch.structures):
        pg = compose_patient_graph(patients[b], g, 3)
        x0 = {("P" if gid < 0 else int(gid)): row
              for gid, row in zip(s.node_ids, batch.x0[batch.node_offsets[b]:])}
        h0 = {k: v @ p["W_v"].data + p["b_v"].data[0] for k, v in x0.items()}
        size = {j: len(pg.visit_nodes[j]) + 1 for j in range(pg.n_visits)}
        expect = layer_oracle(pg, g, h0, lambda j, k: 1.0 / size[j], np.ones(3), edge_h,
                              np.ones(g.n_edge_types + 1), p["W_1"].data, p["b_1"].data[0])
        got = local_rows(s, h, batch.node_offsets[b])
        for k in expect:
            assert np.max(np.abs(got[k] - expect[k])) < 1e-12


# ---------------------------------------------------------------- readout

def test_readout_means():
    codes, g, _ = tiny_world(seed=7)
    rng = np.random.default_rng(7)
    patients = [random_patient(rng, codes, f"p{i}", int(rng.integers(1, 4))) for i in range(4)]
    batch = batch_for(patients, g, 3)
    h = rng.normal(size=(batch.n_nodes, 5))
    hg = T.spmm(batch.readout_graph, Tensor(h)).data
    hp = T.spmm(batch.readout_direct, Tensor(h)).data
    for b, s in enumerate(batch.structures):
        off = batch.node_offsets[b]
        inst = [off + n for n in s.inst_node]
        oracle = sum(h[i] for i in inst) / len(inst)
        assert np.max(np.abs(hg[b] - oracle)) < 1e-12
        direct = set((off + s.direct_local).tolist())
        d_inst = [i for i in inst if i in direct]
        assert np.max(np.abs(hp[b] - sum(h[i] for i in d_inst) / len(d_inst))) < 1e-12
    same = np.tile(rng.normal(size=(1, 5)), (batch.n_nodes, 1))
    assert np.allclose(T.spmm(batch.readout_graph, Tensor(same)).data, same[: batch.size], atol=1e-14)


def test_direct_readout_equals_graph_readout_when_all_nodes_direct():
    from patientkg.clustering import cluster_concept_kgs
    from patientkg.kg_ingest import Category, ConceptKG, EmbeddingProvider, MedicalCode
    codes = [MedicalCode(f"x{i}", Category.CONDITION) for i in range(3)]
    g = cluster_concept_kgs([ConceptKG(c) for c in codes], EmbeddingProvider({}, dim=4), 0.01)
    p = Patient("p", [Visit(0, 1, codes)])
    batch = batch_for([p], g, 1)
    h = np.random.default_rng(0).normal(size=(batch.n_nodes, 3))
    # drop the patient node from the graph mean so both readouts see the same node set
    s = batch.structures[0]
    graph_part = h[:-1].mean(axis=0)
    assert np.allclose(T.spmm(batch.readout_direct, Tensor(h)).data[0], graph_part, atol=1e-14)
    assert s.direct_local.size == s.n_local - 1


def test_node_mode_requires_direct_nodes():
    codes, g, _ = tiny_world()
    model = tiny_model(g, mode="node")
    pg = compose_patient_graph(Patient("p", [Visit(0, 1, [codes[0]])]), g, 3)
    pg.direct = np.zeros(0, np.int64)
    batch = collate([build_structure(pg, g)], g)
    with pytest.raises(EmptyDirectSet):
        model.forward(batch)


# ---------------------------------------------------------------- losses

def test_loss_examples():
    assert bce_loss(Tensor(0.0), [[1]]).item() == pytest.approx(0.6931471806, abs=1e-10)
    assert ce_loss(Tensor(np.zeros((1, 10))), [4]).item() == pytest.approx(2.302585093, abs=1e-9)
    z = Tensor(np.array([[20.0], [-20.0]]))
    assert bce_loss(z, [[1], [0]]).item() < 1e-8
    logits = np.full((2, 10), -20.0)
    logits[0, 3] = logits[1, 7] = 20.0
    assert ce_loss(Tensor(logits), [3, 7]).item() < 1e-8
    with pytest.raises(LabelOutOfRange):
        bce_loss(Tensor(0.0), [[2]])
    with pytest.raises(LabelOutOfRange):
        ce_loss(Tensor(np.zeros((1, 10))), [10])


def test_multilabel_bce_is_mean_over_labels():
    z = np.array([[0.3, -1.0, 2.0]])
    y = np.array([[1, 0, 1]])
    expect = -np.mean(y * np.log(1 / (1 + np.exp(-z))) + (1 - y) * np.log(1 / (1 + np.exp(z))))
    assert bce_loss(Tensor(z), y).item() == pytest.approx(expect, abs=1e-14)


def test_task_specs():
    assert TaskSpec.for_task("mortality").term == "death"
    assert TaskSpec.for_task("los").out_size == 10
    assert TaskSpec.for_task("drugrec", n_drugs=7).out_size == 7
    cfg = ModelConfig.for_task(TaskKind.DRUGREC)
    assert (cfg.gamma, cfg.layers, cfg.hidden) == (0.03, 3, 128)


# ---------------------------------------------------------------- model level

def test_padding_invariance_all_modes():
    codes, g, _ = tiny_world(seed=8)
    rng = np.random.default_rng(8)
    patients = [random_patient(rng, codes, f"p{i}", int(rng.integers(1, 4))) for i in range(6)]
    for mode in ("graph", "node", "joint"):
        model = tiny_model(g, mode=mode, max_visits=6)
        for p in patients:
            tight = model.forward(batch_for([p], g, len(p.visits))).data
            padded = model.forward(batch_for([p], g, len(p.visits) + 3)).data
            assert np.max(np.abs(tight - padded)) <= 1e-12


def test_batching_does_not_change_logits():
    codes, g, _ = tiny_world(seed=9)
    rng = np.random.default_rng(9)
    patients = [random_patient(rng, codes, f"p{i}", int(rng.integers(1, 4))) for i in range(5)]
    model = tiny_model(g)
    together = model.forward(batch_for(patients, g, 3)).data
    alone = np.vstack([model.forward(batch_for([p], g, 3)).data for p in patients])
    assert np.max(np.abs(together - alone)) < 1e-12


def test_checkpoint_round_trip(tmp_path):
    codes, g, _ = tiny_world()
    model = tiny_model(g, task=TaskSpec.for_task("los"))
    model.save(tmp_path / "m.ckpt", {"note": 1})
    back, header = BatModel.load(tmp_path / "m.ckpt")
    assert header["extra"] == {"note": 1}
    assert list(back.params) == list(model.params)
    for k in model.params:
        assert np.array_equal(back.params[k].data, model.params[k].data)
    back.bind(g)
    batch = batch_for([random_patient(np.random.default_rng(0), codes, "p", 2)], g, 3)
    assert np.array_equal(back.forward(batch).data, model.forward(batch).data)
    blob = (tmp_path / "m.ckpt").read_bytes()
    assert blob[:8] == b"PKGCKPT1"
    n = int.from_bytes(blob[8:16], "little")
    n_floats = sum(v.data.size for v in model.params.values())
    assert len(blob) == 16 + n + 8 * n_floats


def test_bind_rejects_mismatched_graph():
    codes, g, _ = tiny_world()
    _, other, _ = tiny_world(n_concepts=5)
    model = tiny_model(g)
    with pytest.raises(T.ShapeMismatch):
        model.bind(other)
