"""Seeded synthetic EHR cohorts, triple stores and embedding tables.

Labels follow planted rules over hidden code subsets so that a model has
real signal to learn:

* mortality of visit ``t`` is 1 iff any mortality-risk code occurs in an
  earlier visit (for the first visit: in the visit itself);
* the admit-to-admit gap after a visit is within the readmission window
  iff that visit holds a readmission-risk code;
* length of stay grows with the number of long-stay codes in the visit;
* each condition brings its own treatment drugs.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .kg_ingest import Category, MedicalCode, Triple, normalize, write_embeddings, write_triples
from .patient_graph import Patient, Visit, write_ehr


class InvalidConfig(ValueError):
    pass


@dataclass
class SynthConfig:
    # cohort size and per-patient means of a MIMIC-III-like cohort
    n_patients: int = 35707
    mean_visits: float = 1.24
    mean_conditions: float = 12.89
    mean_procedures: float = 4.54
    mean_drugs: float = 33.71
    n_conditions: int = 300
    n_procedures: int = 100
    n_drugs: int = 200
    mortality_prevalence: float = 0.1
    readmission_prevalence: float = 0.3
    n_long_stay_codes: int = 30
    drugs_per_condition: int = 2
    n_concepts: int = 400
    variants_per_concept: int = 2
    n_relations: int = 12
    concepts_per_code: int = 3
    store_triples: int = 1200
    embedding_dim: int = 64
    paraphrase_noise: float = 0.02
    seed: int = 0

    def validate(self) -> None:
        means = (self.mean_visits, self.mean_conditions, self.mean_procedures, self.mean_drugs)
        if self.n_patients < 1 or any(m <= 0 for m in means):
            raise InvalidConfig("patient count and all means must be positive")
        if self.mean_visits < 1:
            raise InvalidConfig("every patient has at least one visit")
        for p in (self.mortality_prevalence, self.readmission_prevalence):
            if not 0 < p < 1:
                raise InvalidConfig("prevalences must lie in (0, 1)")
        if min(self.n_conditions, self.n_procedures, self.n_drugs, self.n_concepts,
               self.n_relations) < 1:
            raise InvalidConfig("vocabulary sizes must be positive")
        if self.embedding_dim < 2:
            raise InvalidConfig("embedding_dim must be >= 2")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class PlantedRules:
    mortality_codes: list[str]
    readmission_codes: list[str]
    long_stay_codes: list[str]
    treatments: dict[str, list[str]]


@dataclass
class Cohort:
    patients: list[Patient]
    triples: list[Triple]
    embeddings: dict[str, np.ndarray]
    rules: PlantedRules
    config: SynthConfig


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _risk_fraction(prevalence: float, codes_per_draw: float) -> float:
    # P(no risk code among k uniform draws) ~ (1 - f)^k
    return 1.0 - (1.0 - prevalence) ** (1.0 / max(codes_per_draw, 1.0))


def code_vocabulary(cfg: SynthConfig) -> dict[Category, list[str]]:
    return {
        Category.CONDITION: [f"c{i:04d}" for i in range(cfg.n_conditions)],
        Category.PROCEDURE: [f"p{i:04d}" for i in range(cfg.n_procedures)],
        Category.DRUG: [f"d{i:04d}" for i in range(cfg.n_drugs)],
    }


def _rules(cfg: SynthConfig, vocab, rng: np.random.Generator) -> PlantedRules:
    conds, procs, drugs = vocab[Category.CONDITION], vocab[Category.PROCEDURE], vocab[Category.DRUG]
    per_visit = (cfg.mean_conditions + cfg.mean_procedures) / cfg.mean_visits
    nonrx = conds + procs
    n_mort = max(1, round(_risk_fraction(cfg.mortality_prevalence, per_visit) * len(nonrx)))
    n_read = max(1, round(_risk_fraction(cfg.readmission_prevalence, per_visit) * len(nonrx)))
    picked = rng.permutation(len(nonrx))
    mort = sorted(nonrx[i] for i in picked[:n_mort])
    read = sorted(nonrx[i] for i in picked[n_mort:n_mort + n_read])
    long_stay = sorted(conds[i] for i in rng.permutation(len(conds))[:min(cfg.n_long_stay_codes, len(conds))])
    k = min(cfg.drugs_per_condition, len(drugs))
    treatments = {c: sorted(drugs[i] for i in rng.choice(len(drugs), size=k, replace=False))
                  for c in conds}
    return PlantedRules(mort, read, long_stay, treatments)


def _draw(rng, vocab: list[str], n: int) -> list[str]:
    n = min(n, len(vocab))
    return sorted(vocab[i] for i in rng.choice(len(vocab), size=n, replace=False))


def _patient(idx: int, cfg: SynthConfig, vocab, rules: PlantedRules) -> Patient:
    rng = np.random.default_rng([cfg.seed, idx])
    n_visits = 1 + rng.poisson(cfg.mean_visits - 1.0)
    mu_c = cfg.mean_conditions / cfg.mean_visits
    mu_p = cfg.mean_procedures / cfg.mean_visits
    mu_d = cfg.mean_drugs / cfg.mean_visits
    mort, read, long_stay = set(rules.mortality_codes), set(rules.readmission_codes), set(rules.long_stay_codes)
    visits = []
    t = float(rng.uniform(0.0, 1000.0))
    seen_risk = False
    for j in range(n_visits):
        conds = _draw(rng, vocab[Category.CONDITION], 1 + rng.poisson(max(mu_c - 1.0, 0.0)))
        procs = _draw(rng, vocab[Category.PROCEDURE], rng.poisson(mu_p))
        treat = sorted({d for c in conds for d in rules.treatments[c]})
        n_extra = max(rng.poisson(mu_d) - len(treat), 0)
        others = [d for d in _draw(rng, vocab[Category.DRUG], n_extra + len(treat)) if d not in treat]
        drugs = sorted(set(treat) | set(others[:n_extra]))
        here = set(conds) | set(procs)
        risky_now = bool(here & mort)
        mortality = int(seen_risk if j > 0 else risky_now)
        seen_risk = seen_risk or risky_now
        n_long = len(set(conds) & long_stay)
        los = float(0.3 + 3.0 * n_long + rng.uniform(0.0, 0.6))
        codes = ([MedicalCode(c, Category.CONDITION) for c in conds]
                 + [MedicalCode(p, Category.PROCEDURE) for p in procs]
                 + [MedicalCode(d, Category.DRUG) for d in drugs])
        visits.append(Visit(round(t, 3), round(t + los, 3), codes, mortality, round(los, 3)))
        if here & read:
            gap = float(rng.uniform(1.0, 14.0))
        else:
            gap = float(rng.uniform(16.0, 365.0))
        t += gap
    return Patient(f"pt{idx:06d}", visits)


def _knowledge(cfg: SynthConfig, vocab, rules: PlantedRules, rng: np.random.Generator):
    w = cfg.embedding_dim
    emb: dict[str, np.ndarray] = {}
    all_codes = [c for cat in Category for c in vocab[cat]]
    for c in all_codes:
        emb[c] = _unit(rng.standard_normal(w))

    concepts: list[list[str]] = []
    for i in range(cfg.n_concepts):
        base = _unit(rng.standard_normal(w))
        names = [f"concept {i:04d}"] + [f"concept {i:04d} variant {v}" for v in range(1, cfg.variants_per_concept)]
        for name in names:
            emb[name] = _unit(base + cfg.paraphrase_noise * rng.standard_normal(w))
        concepts.append(names)
    relations: list[list[str]] = []
    for i in range(cfg.n_relations):
        base = _unit(rng.standard_normal(w))
        names = [f"relation {i:02d}", f"relation {i:02d} alt"]
        for name in names:
            emb[name] = _unit(base + cfg.paraphrase_noise * rng.standard_normal(w))
        relations.append(names)

    def pick(groups):
        grp = groups[rng.integers(len(groups))]
        return grp[rng.integers(len(grp))]

    triples: set[Triple] = set()
    for c in all_codes:
        for _ in range(cfg.concepts_per_code):
            triples.add(Triple(c, pick(relations), pick(concepts)))
    while len(triples) < cfg.store_triples + len(all_codes) * cfg.concepts_per_code:
        a, b = pick(concepts), pick(concepts)
        if a != b:
            triples.add(Triple(a, pick(relations), b))

    task_terms = {
        "death": rules.mortality_codes,
        "readmission": rules.readmission_codes,
        "length of stay": rules.long_stay_codes,
        "drug": vocab[Category.DRUG],
    }
    for term, related in task_terms.items():
        centre = np.sum([emb[c] for c in related], axis=0)
        emb[term] = _unit(_unit(centre) + 0.5 * _unit(rng.standard_normal(w)))
    return sorted(triples), emb


def generate_cohort(cfg: SynthConfig) -> Cohort:
    """Build the cohort, triple store and embeddings; deterministic given ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 2**31 - 1])
    vocab = code_vocabulary(cfg)
    rules = _rules(cfg, vocab, rng)
    triples, emb = _knowledge(cfg, vocab, rules, rng)
    patients = [_patient(i, cfg, vocab, rules) for i in range(cfg.n_patients)]
    return Cohort(patients, triples, emb, rules, cfg)


def write_cohort(cohort: Cohort, out_dir: str | os.PathLike) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "ehr": out / "ehr.jsonl",
        "triples": out / "triples.tsv",
        "embeddings": out / "embeddings.tsv",
        "rules": out / "planted.json",
    }
    write_ehr(paths["ehr"], cohort.patients)
    write_triples(paths["triples"], cohort.triples)
    write_embeddings(paths["embeddings"], {normalize(k): v for k, v in cohort.embeddings.items()},
                     cohort.config.embedding_dim)
    with open(paths["rules"], "w", encoding="utf-8") as fh:
        json.dump({"config": cohort.config.to_json(), **asdict(cohort.rules)}, fh,
                  indent=1, sort_keys=True)
    return paths


def cohort_stats(patients) -> dict[str, float]:
    n = len(patients)
    count = lambda cat: sum(1 for p in patients for v in p.visits for c in v.codes if c.category is cat)
    return {
        "patients": n,
        "visits": sum(len(p.visits) for p in patients),
        "visits_per_patient": sum(len(p.visits) for p in patients) / n,
        "conditions_per_patient": count(Category.CONDITION) / n,
        "procedures_per_patient": count(Category.PROCEDURE) / n,
        "drugs_per_patient": count(Category.DRUG) / n,
    }
