from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patientkg.kg_ingest import (Category, ConceptKG, EmbeddingProvider, MedicalCode, Triple,
                                 TripleStore, UnknownEntity, aggregate_runs, format_triples,
                                 get_embedding, parse_llm_triples, read_concept_kgs,
                                 read_embeddings, read_triples, sample_subgraph,
                                 write_concept_kgs, write_embeddings, write_triples)


def code(name="a"):
    return MedicalCode(name, Category.CONDITION)


def test_parse_two_triples():
    text = "[tuberculosis, may be treated with, antibiotics], [tuberculosis, affects, lungs]"
    res = parse_llm_triples(text)
    assert res.triples == [Triple("tuberculosis", "may be treated with", "antibiotics"),
                           Triple("tuberculosis", "affects", "lungs")]
    assert res.skipped == 0


def test_parse_empty():
    res = parse_llm_triples("")
    assert res.triples == [] and res.skipped == 0


def test_parse_skips_malformed():
    res = parse_llm_triples("[a, b], [x, y, z]")
    assert res.triples == [Triple("x", "y", "z")]
    assert res.skipped == 1


def test_parse_trims_and_lowercases():
    res = parse_llm_triples("Here you go:\n[  Heart  Failure , CAUSES,  Edema ]\n[, , ]")
    assert res.triples == [Triple("heart failure", "causes", "edema")]
    assert res.skipped == 1


words = st.text(alphabet="abcdefghij ", min_size=1, max_size=8).filter(lambda s: s.strip())


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(words, words, words), max_size=10))
def test_parse_round_trip(parts):
    triples = [Triple(*p) for p in parts]
    assert parse_llm_triples(format_triples(triples)).triples == triples


def test_aggregate_union():
    t1, t2 = Triple("a", "r", "b"), Triple("b", "r", "c")
    assert aggregate_runs([{t1}, {t1}, {t2}], code()).triples == {t1, t2}
    assert len(aggregate_runs([set(), set(), set()], code())) == 0


def test_aggregate_counts_union_by_brute_force():
    # 15 triples occur in two of the three runs
    shared = [Triple("s", "r", f"x{i}") for i in range(15)]
    own = lambda k, n: [Triple(f"run{k}", "r", f"y{i}") for i in range(n)]
    runs = [shared + own(0, 25), shared + own(1, 25), own(2, 40)]
    assert [len(r) for r in runs] == [40, 40, 40]
    brute = set()
    for run in runs:
        for t in run:
            if t not in brute:
                brute.add(t)
    kg = aggregate_runs(runs, code())
    assert len(kg) == len(brute) == 105


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.tuples(words, words, words), max_size=6), min_size=1, max_size=4),
       st.randoms())
def test_aggregate_idempotent_and_order_free(runs, rnd):
    runs = [[Triple(*p) for p in run] for run in runs]
    once = aggregate_runs(runs, code())
    assert aggregate_runs([once.triples], code()).triples == once.triples
    shuffled = list(runs)
    rnd.shuffle(shuffled)
    assert aggregate_runs(shuffled, code()).triples == once.triples


def test_store_index_counts_self_loops_twice():
    store = TripleStore([Triple("a", "r", "a"), Triple("a", "r", "b")])
    assert store.incident("a") == (0, 0, 1)
    assert store.incident("b") == (1,)


def test_hop_one_retrieves_every_incident_triple():
    store = TripleStore([Triple("a", "r", "b"), Triple("c", "r", "a"), Triple("a", "s", "d"),
                         Triple("b", "r", "e")])
    for eps in (1, 2, 5):
        kg = sample_subgraph(code("a"), store, kappa=1, epsilon=eps, seed=0)
        assert kg.triples == {Triple("a", "r", "b"), Triple("c", "r", "a"), Triple("a", "s", "d")}


def test_chain_two_hops_excludes_third():
    store = TripleStore([Triple("a", "r", "b"), Triple("b", "r", "c"), Triple("c", "r", "d")])
    kg = sample_subgraph(code("a"), store, kappa=2, epsilon=5, seed=0)
    assert kg.triples == {Triple("a", "r", "b"), Triple("b", "r", "c")}


def test_unknown_entity():
    with pytest.raises(UnknownEntity):
        sample_subgraph(code("zzz"), TripleStore([Triple("a", "r", "b")]))


def random_store(rng, n_entities=30, n_triples=120):
    ents = [f"e{i}" for i in range(n_entities)]
    rels = ["r0", "r1", "r2"]
    return TripleStore([Triple(ents[rng.integers(n_entities)], rels[rng.integers(3)],
                               ents[rng.integers(n_entities)]) for _ in range(n_triples)])


def bfs_distances(store, root):
    dist = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for i in store.incident(u):
            t = store.triple(i)
            for v in t.entities():
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
    return dist


def test_sampler_properties_on_random_stores():
    rng = np.random.default_rng(0)
    for trial in range(100):
        store = random_store(rng, n_triples=int(rng.integers(20, 200)))
        root = store.entities()[int(rng.integers(len(store.entities())))]
        kappa, eps = int(rng.integers(1, 4)), int(rng.integers(1, 6))
        kg = sample_subgraph(code(root), store, kappa, eps, seed=trial)
        dist = bfs_distances(store, root)
        assert all(dist[e] <= kappa for e in kg.entities())
        incident = {store.triple(i) for i in store.incident(root)}
        assert incident <= kg.triples
        # every expanded frontier entity is among the sampled entities
        assert len(kg) <= len(incident) + eps * len(kg.entities())
        again = sample_subgraph(code(root), store, kappa, eps, seed=trial)
        assert again.sorted_triples() == kg.sorted_triples()


def test_provider_lookup_and_fallback():
    v = np.arange(4.0)
    p = EmbeddingProvider({"Pneumonia": v}, dim=4, seed=7)
    assert np.array_equal(get_embedding(p, "pneumonia"), v)
    miss = get_embedding(p, "never seen")
    assert abs(np.linalg.norm(miss) - 1.0) <= 1e-12
    assert np.array_equal(miss, get_embedding(p, "never seen"))
    assert miss.shape == (4,)
    other_seed = EmbeddingProvider({}, dim=4, seed=8).get("never seen")
    assert not np.array_equal(miss, other_seed)


def test_default_dimension():
    assert EmbeddingProvider().get("x").shape == (1536,)


def test_file_round_trips(tmp_path):
    triples = [Triple("a", "r", "b"), Triple("b c", "s", "d")]
    write_triples(tmp_path / "t.tsv", triples)
    assert read_triples(tmp_path / "t.tsv") == triples

    table = {"a": np.array([0.1, -2.5]), "b c": np.array([1e-300, 3.0])}
    write_embeddings(tmp_path / "e.tsv", table, 2)
    p = read_embeddings(tmp_path / "e.tsv")
    assert p.dim == 2
    for k, v in table.items():
        assert np.array_equal(p.get(k), v)

    kgs = [ConceptKG(code("a"), frozenset(triples)), ConceptKG(MedicalCode("d1", "drug"))]
    write_concept_kgs(tmp_path / "k.tsv", kgs)
    back = read_concept_kgs(tmp_path / "k.tsv")
    assert [(k.code, k.triples) for k in back] == [(k.code, k.triples) for k in kgs]
