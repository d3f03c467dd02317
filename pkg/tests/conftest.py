import numpy as np
import pytest

from patientkg.clustering import cluster_concept_kgs
from patientkg.kg_ingest import Category, ConceptKG, EmbeddingProvider, MedicalCode, Triple, TripleStore
from patientkg.model import BatModel, ModelConfig, TaskSpec, build_structure, collate
from patientkg.patient_graph import Patient, Visit, compose_patient_graph
from patientkg.pipeline import ehr_codes, ingest_store
from patientkg.synth import SynthConfig, generate_cohort
from patientkg.train import Dataset


def tiny_world(seed=0, n_codes=4, n_concepts=8, n_relations=3, triples_per_code=3, dim=16):
    """Concept graphs over random strings; a tiny delta keeps every string its own node.

    Node count is ``n_codes + n_concepts`` (all concepts get used).
    """
    rng = np.random.default_rng(seed)
    codes = [MedicalCode(f"code{i}", Category.CONDITION) for i in range(n_codes)]
    concepts = [f"concept {i}" for i in range(n_concepts)]
    rels = [f"rel {i}" for i in range(n_relations)]
    kgs = []
    for i, code in enumerate(codes):
        ts = set()
        # cover every concept at least once across codes
        own = concepts[i::n_codes]
        for c in own:
            ts.add(Triple(code.id, rels[rng.integers(n_relations)], c))
        while len(ts) < triples_per_code + len(own):
            a, b = rng.choice(concepts, size=2, replace=False)
            ts.add(Triple(a, rels[rng.integers(n_relations)], b))
        kgs.append(ConceptKG(code, frozenset(ts)))
    provider = EmbeddingProvider({}, dim=dim, seed=seed)
    g = cluster_concept_kgs(kgs, provider, delta=0.01)
    return codes, g, provider


def random_patient(rng, codes, pid, n_visits, per_visit=2):
    visits = []
    t = 0.0
    for _ in range(n_visits):
        chosen = rng.choice(len(codes), size=min(per_visit, len(codes)), replace=False)
        visits.append(Visit(t, t + 1.0, [codes[i] for i in sorted(chosen)], 0, 1.0))
        t += 30.0
    return Patient(pid, visits)


def batch_for(patients, g, n_rows):
    return collate([build_structure(compose_patient_graph(p, g, n_rows), g) for p in patients], g)


def tiny_model(g, mode="joint", hidden=8, layers=2, max_visits=3, seed=0, task=None, **kw):
    cfg = ModelConfig(mode=mode, hidden=hidden, layers=layers, gamma=0.1, max_visits=max_visits, **kw)
    task = task or TaskSpec.for_task("mortality")
    return BatModel.for_graph(g, cfg, task, seed)


PLANTED = dict(n_patients=200, mean_visits=3.0, mean_conditions=18.0, mean_procedures=6.0,
               mean_drugs=18.0, n_conditions=80, n_procedures=30, n_drugs=60, n_concepts=120,
               store_triples=300, seed=0)


def planted_world(**overrides):
    cfg = SynthConfig(**{**PLANTED, **overrides})
    cohort = generate_cohort(cfg)
    store = TripleStore(cohort.triples)
    kgs = ingest_store(ehr_codes(cohort.patients), store, 2, 5, cfg.seed)
    provider = EmbeddingProvider(cohort.embeddings, dim=cfg.embedding_dim)
    g = cluster_concept_kgs(kgs, provider, 0.15)
    return cohort, g, provider


@pytest.fixture(scope="session")
def planted():
    cohort, g, provider = planted_world()
    return cohort, g, provider, Dataset(cohort.patients, g, "mortality")
