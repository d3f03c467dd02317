"""Triple ingestion: LLM output parsing, multi-run aggregation, store sampling
and word embeddings for entity/relation strings."""
from __future__ import annotations

import hashlib
import logging
import os
import re
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DIM = 1536


class UnknownEntity(KeyError):
    pass


class NetworkError(RuntimeError):
    pass


class Timeout(NetworkError):
    pass


class Category(str, Enum):
    CONDITION = "condition"
    PROCEDURE = "procedure"
    DRUG = "drug"


@dataclass(frozen=True)
class MedicalCode:
    id: str
    category: Category

    def __post_init__(self):
        if not self.id or not self.id.strip():
            raise ValueError("medical code id must be non-empty")
        object.__setattr__(self, "category", Category(self.category))

    @property
    def entity(self) -> str:
        """The string naming this code inside a KG."""
        return normalize(self.id)


def normalize(s: str) -> str:
    return " ".join(s.lower().split())


@dataclass(frozen=True, order=True)
class Triple:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        for name in ("head", "relation", "tail"):
            v = normalize(getattr(self, name))
            if not v:
                raise ValueError(f"triple {name} is empty")
            object.__setattr__(self, name, v)

    def entities(self) -> tuple[str, str]:
        return self.head, self.tail


@dataclass
class ConceptKG:
    code: MedicalCode
    triples: frozenset[Triple] = field(default_factory=frozenset)

    def __post_init__(self):
        self.triples = frozenset(self.triples)

    def __len__(self) -> int:
        return len(self.triples)

    def sorted_triples(self) -> list[Triple]:
        return sorted(self.triples)

    def entities(self) -> set[str]:
        return {e for t in self.triples for e in t.entities()}

    def relations(self) -> set[str]:
        return {t.relation for t in self.triples}


# ---------------------------------------------------------------- LLM output

_BRACKETED = re.compile(r"\[([^\[\]]*)\]")


@dataclass
class ParseResult:
    triples: list[Triple]
    skipped: int

    def __iter__(self):
        return iter(self.triples)

    def __len__(self) -> int:
        return len(self.triples)


def parse_llm_triples(text: str) -> ParseResult:
    """Extract every ``[head, relation, tail]`` list from a raw LLM response.

    Lists without exactly three non-empty comma-separated elements are
    skipped and counted. Elements are trimmed and lowercased.
    """
    found: list[Triple] = []
    skipped = 0
    for m in _BRACKETED.finditer(text or ""):
        parts = [p.strip() for p in m.group(1).split(",")]
        if len(parts) != 3 or not all(normalize(p) for p in parts):
            skipped += 1
            continue
        found.append(Triple(*parts))
    return ParseResult(found, skipped)


def format_triples(triples: Iterable[Triple]) -> str:
    return ", ".join(f"[{t.head}, {t.relation}, {t.tail}]" for t in triples)


def aggregate_runs(runs: Sequence[Iterable[Triple]], code: MedicalCode) -> ConceptKG:
    """Union of the triples from repeated prompting runs for one code."""
    merged: set[Triple] = set()
    for run in runs:
        merged.update(run)
    return ConceptKG(code, frozenset(merged))


# ---------------------------------------------------------------- triple store

class TripleStore:
    """Read-only multiset of triples indexed by incident entity."""

    def __init__(self, triples: Iterable[Triple]):
        self._triples: tuple[Triple, ...] = tuple(triples)
        index: dict[str, list[int]] = defaultdict(list)
        for i, t in enumerate(self._triples):
            index[t.head].append(i)
            # self-loops are listed twice, once per incident endpoint
            index[t.tail].append(i)
        self._index = {k: tuple(v) for k, v in index.items()}

    def __len__(self) -> int:
        return len(self._triples)

    def __contains__(self, entity: str) -> bool:
        return normalize(entity) in self._index

    @property
    def triples(self) -> tuple[Triple, ...]:
        return self._triples

    def incident(self, entity: str) -> tuple[int, ...]:
        return self._index.get(normalize(entity), ())

    def triple(self, i: int) -> Triple:
        return self._triples[i]

    def entities(self) -> list[str]:
        return sorted(self._index)


def sample_subgraph(code: MedicalCode, store: TripleStore, kappa: int = 2,
                    epsilon: int = 5, seed: int = 0) -> ConceptKG:
    """Random ``kappa``-hop subgraph around the code's entity.

    Hop 1 takes every incident triple of the seed entity; later hops take
    up to ``epsilon`` incident triples per frontier entity, uniformly
    without replacement. Entities are expanded at most once.
    """
    if kappa < 1 or epsilon < 1:
        raise ValueError("kappa and epsilon must be >= 1")
    root = code.entity
    if root not in store:
        raise UnknownEntity(root)
    rng = np.random.default_rng(seed)
    chosen: set[int] = set()
    visited = {root}
    frontier = [root]
    for hop in range(1, kappa + 1):
        nxt: list[str] = []
        for ent in frontier:
            ids = sorted(set(store.incident(ent)))
            if hop > 1 and len(ids) > epsilon:
                pick = rng.choice(len(ids), size=epsilon, replace=False)
                ids = [ids[k] for k in sorted(pick)]
            for i in ids:
                chosen.add(i)
                t = store.triple(i)
                other = t.tail if t.head == ent else t.head
                if other not in visited:
                    visited.add(other)
                    nxt.append(other)
        frontier = nxt
    return ConceptKG(code, frozenset(store.triple(i) for i in chosen))


# ---------------------------------------------------------------- embeddings

class EmbeddingProvider:
    """String -> vector lookup with a deterministic hashed fallback.

    Misses are mapped to unit vectors of pseudo-normal draws seeded by
    the string and ``seed``, so offline runs need no embedding service.
    """

    def __init__(self, table: dict[str, np.ndarray] | None = None,
                 dim: int = DEFAULT_DIM, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.table: dict[str, np.ndarray] = {}
        for k, v in (table or {}).items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (dim,):
                raise ValueError(f"embedding for {k!r} has shape {v.shape}, expected ({dim},)")
            self.table[normalize(k)] = v
        self.misses = 0

    def __contains__(self, s: str) -> bool:
        return normalize(s) in self.table

    def get(self, s: str) -> np.ndarray:
        key = normalize(s)
        if not key:
            raise ValueError("cannot embed an empty string")
        hit = self.table.get(key)
        if hit is not None:
            return hit.copy()
        self.misses += 1
        return fallback_embedding(key, self.dim, self.seed)

    def matrix(self, strings: Sequence[str]) -> np.ndarray:
        if not strings:
            return np.zeros((0, self.dim))
        return np.stack([self.get(s) for s in strings])


def fallback_embedding(s: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x00{s}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def get_embedding(provider: EmbeddingProvider, s: str) -> np.ndarray:
    return provider.get(s)


# ---------------------------------------------------------------- files

def read_triples(path: str | os.PathLike) -> list[Triple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            out.append(Triple(*parts))
    return out


def write_triples(path: str | os.PathLike, triples: Iterable[Triple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(f"{t.head}\t{t.relation}\t{t.tail}\n")


def read_embeddings(path: str | os.PathLike, seed: int = 0) -> EmbeddingProvider:
    with open(path, encoding="utf-8") as fh:
        dim = int(fh.readline().strip())
        table = {}
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            key, _, vec = line.rpartition("\t")
            table[key] = np.array([float(x) for x in vec.split(",")])
    return EmbeddingProvider(table, dim=dim, seed=seed)


def write_embeddings(path: str | os.PathLike, table: dict[str, np.ndarray], dim: int) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{dim}\n")
        for key in sorted(table):
            fh.write(key + "\t" + ",".join(repr(float(x)) for x in table[key]) + "\n")


def write_concept_kgs(path: str | os.PathLike, kgs: Iterable[ConceptKG]) -> None:
    """Per-code triples as ``code_id\\tcategory\\thead\\trelation\\ttail`` lines."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for kg in kgs:
            if not kg.triples:
                fh.write(f"{kg.code.id}\t{kg.code.category.value}\t\t\t\n")
            for t in kg.sorted_triples():
                fh.write(f"{kg.code.id}\t{kg.code.category.value}\t{t.head}\t{t.relation}\t{t.tail}\n")


def read_concept_kgs(path: str | os.PathLike) -> list[ConceptKG]:
    order: list[MedicalCode] = []
    triples: dict[MedicalCode, set[Triple]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 5:
                continue
            code = MedicalCode(parts[0], Category(parts[1]))
            if code not in triples:
                triples[code] = set()
                order.append(code)
            if parts[2]:
                triples[code].add(Triple(*parts[2:]))
    return [ConceptKG(c, frozenset(triples[c])) for c in order]


# ---------------------------------------------------------------- remote

def fetch_remote_triples(endpoint: str, prompt: str, timeout: float = 30.0,
                         api_key_env: str = "PATIENTKG_API_KEY") -> str:
    """POST a prompt to an LLM endpoint and return the raw response body.

    Never used by the offline pipeline.
    """
    import requests

    headers = {}
    key = os.environ.get(api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    try:
        resp = requests.post(endpoint, json={"prompt": prompt}, headers=headers, timeout=timeout)
        resp.raise_for_status()
    except requests.Timeout as exc:
        raise Timeout(str(exc)) from exc
    except requests.RequestException as exc:
        raise NetworkError(str(exc)) from exc
    return resp.text
