import numpy as np
import pytest

from patientkg.clustering import cluster_concept_kgs
from patientkg.kg_ingest import Category, ConceptKG, EmbeddingProvider, MedicalCode, Triple
from patientkg.patient_graph import (EmptyDirectSet, Patient, PatientGraph, UnknownCode, Visit,
                                     compose_patient_graph, patient_node_init_embedding,
                                     read_ehr, read_patient_graphs, write_ehr,
                                     write_patient_graphs)

from conftest import random_patient, tiny_world


def one_code_world():
    c = MedicalCode("a", Category.CONDITION)
    kg = ConceptKG(c, frozenset({Triple("a", "r", "b")}))
    g = cluster_concept_kgs([kg], EmbeddingProvider({}, dim=8), 0.01)
    return c, g


def test_single_code_single_visit():
    c, g = one_code_world()
    pg = compose_patient_graph(Patient("p", [Visit(0, 1, [c])]), g)
    a, b = g.anchors["a"], 1 - g.anchors["a"]
    assert set(pg.visit_nodes[0].tolist()) == {a, b}
    assert pg.direct.tolist() == [a]
    assert pg.multihot().tolist() == [[1.0, 1.0]]
    assert pg.patient_degree == 1


def test_shared_code_in_two_visits():
    codes, g, _ = tiny_world()
    p = Patient("p", [Visit(0, 1, [codes[0]]), Visit(5, 6, [codes[0], codes[1]])])
    pg = compose_patient_graph(p, g, 4)
    gm = pg.multihot()
    anchor = g.anchors[codes[0].id]
    assert gm[0, anchor] == 1 and gm[1, anchor] == 1
    assert np.all(gm[2:] == 0)


def test_reconstruction_and_monotonicity():
    codes, g, _ = tiny_world(seed=3)
    rng = np.random.default_rng(0)
    for trial in range(20):
        p = random_patient(rng, codes, f"p{trial}", int(rng.integers(1, 4)))
        pg = compose_patient_graph(p, g, 4)
        gm = pg.multihot()
        for j in range(pg.n_rows):
            for m in range(g.n_nodes):
                present = j < pg.n_visits and m in set(pg.visit_nodes[j].tolist())
                assert (gm[j, m] == 1) == present
        for j, v in enumerate(p.visits):
            expected = set()
            for c in v.codes:
                expected |= set(g.code_nodes[c.id])
            assert set(pg.visit_nodes[j].tolist()) == expected
        # adding a code never removes nodes
        extra = [Visit(v.t_admit, v.t_discharge, v.codes + [codes[-1]]) for v in p.visits]
        bigger = compose_patient_graph(Patient(p.id, extra), g, 4)
        for j in range(pg.n_visits):
            assert set(pg.visit_nodes[j].tolist()) <= set(bigger.visit_nodes[j].tolist())
        anchors = {g.anchors[c.id] for v in p.visits for c in v.codes}
        assert set(pg.direct.tolist()) == anchors == set(np.concatenate(pg.visit_anchors).tolist())


def test_overflow_keeps_most_recent():
    codes, g, _ = tiny_world()
    p = Patient("p", [Visit(float(i), float(i), [codes[i]]) for i in range(4)])
    pg = compose_patient_graph(p, g, 2)
    assert pg.n_visits == 2
    assert pg.direct.tolist() == sorted([g.anchors[codes[2].id], g.anchors[codes[3].id]])


def test_unknown_code():
    codes, g, _ = tiny_world()
    p = Patient("p", [Visit(0, 1, [MedicalCode("missing", Category.DRUG)])])
    with pytest.raises(UnknownCode):
        compose_patient_graph(p, g)


def test_patient_node_embedding():
    codes, g, _ = tiny_world()
    pg = compose_patient_graph(Patient("p", [Visit(0, 1, [codes[0]])]), g)
    assert np.array_equal(patient_node_init_embedding(pg, g), g.node_embeddings[g.anchors["code0"]])
    pg2 = compose_patient_graph(Patient("p", [Visit(0, 1, codes[:2])]), g)
    u, v = (g.node_embeddings[g.anchors[c.id]] for c in codes[:2])
    assert np.allclose(patient_node_init_embedding(pg2, g), (u + v) / 2, atol=1e-15)

    rng = np.random.default_rng(0)
    direct = np.sort(rng.choice(g.n_nodes, size=5, replace=False))
    pg5 = PatientGraph("q", 1, g.n_nodes, [direct], [np.zeros(0, np.int64)], [direct], direct)
    oracle = np.zeros(g.dim)
    for d in direct:
        for k in range(g.dim):
            oracle[k] += g.node_embeddings[d, k]
    assert np.allclose(patient_node_init_embedding(pg5, g), oracle / 5, atol=1e-12)

    empty = PatientGraph("e", 1, g.n_nodes, [], [], [], np.zeros(0, np.int64))
    with pytest.raises(EmptyDirectSet):
        patient_node_init_embedding(empty, g)


def test_visit_validation():
    with pytest.raises(ValueError):
        Visit(2.0, 1.0, [])
    with pytest.raises(ValueError):
        Patient("p", [Visit(2.0, 3.0, []), Visit(1.0, 3.0, [])])
    with pytest.raises(ValueError):
        Patient("p", [])


def test_ehr_and_patient_graph_round_trip(tmp_path):
    codes, g, _ = tiny_world()
    rng = np.random.default_rng(1)
    patients = [random_patient(rng, codes, f"p{i}", 2) for i in range(3)]
    patients[0].visits[0].codes.append(MedicalCode("d7", Category.DRUG))
    write_ehr(tmp_path / "ehr.jsonl", patients)
    back = read_ehr(tmp_path / "ehr.jsonl")
    assert [(p.id, [(v.t_admit, sorted(v.codes, key=lambda c: c.id)) for v in p.visits])
            for p in back] == \
           [(p.id, [(v.t_admit, sorted(v.codes, key=lambda c: c.id)) for v in p.visits])
            for p in patients]
    graphs = [compose_patient_graph(p, g, 3) for p in patients[1:]]
    write_patient_graphs(tmp_path / "pg.jsonl", graphs)
    for a, b in zip(graphs, read_patient_graphs(tmp_path / "pg.jsonl", g)):
        assert np.array_equal(a.multihot(), b.multihot())
        assert np.array_equal(a.direct, b.direct)
        assert np.array_equal(a.patient_embedding, b.patient_embedding)
