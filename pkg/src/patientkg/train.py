"""Sample construction, Adam training with early stopping, and evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from . import tensor as T
from .clustering import GlobalGraph
from .kg_ingest import Category, EmbeddingProvider
from .model import (LOS_CLASSES, READMISSION_WINDOW_DAYS, BatModel, GraphBatch, GraphStructure,
                    ModelConfig, TaskKind, TaskSpec, build_structure, collate, loss)
from .patient_graph import Patient, compose_patient_graph

log = logging.getLogger(__name__)

ALL_CATEGORIES = (Category.CONDITION, Category.PROCEDURE, Category.DRUG)
NO_DRUGS = (Category.CONDITION, Category.PROCEDURE)


class EmptyTrainingSet(ValueError):
    pass


@dataclass
class Sample:
    patient_id: str
    n_input: int
    label: object

    def label_array(self) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.label, dtype=np.float64))


def los_class(days: float) -> int:
    """Stay length bucket: <1 day, one class per day up to a week, 8-14 days, longer."""
    d = math.floor(days)
    if d < 1:
        return 0
    if d <= 7:
        return d
    if d <= 14:
        return 8
    return 9


def feature_categories(task: TaskKind | str) -> tuple[Category, ...]:
    """Drugs are inputs only for mortality and readmission."""
    return ALL_CATEGORIES if TaskKind(task) in (TaskKind.MORTALITY, TaskKind.READMISSION) else NO_DRUGS


def drug_vocabulary(patients: Sequence[Patient]) -> list[str]:
    return sorted({c.id for p in patients for v in p.visits for c in v.codes
                   if c.category is Category.DRUG})


def make_samples(patients: Sequence[Patient], task: TaskKind | str,
                 drug_vocab: Sequence[str] | None = None,
                 window_days: float = READMISSION_WINDOW_DAYS) -> list[Sample]:
    task = TaskKind(task)
    out: list[Sample] = []
    if task is TaskKind.DRUGREC:
        vocab = {d: i for i, d in enumerate(drug_vocab if drug_vocab is not None
                                            else drug_vocabulary(patients))}
    for p in patients:
        visits = p.visits
        if task is TaskKind.MORTALITY:
            for t in range(1, len(visits)):
                out.append(Sample(p.id, t, int(bool(visits[t].mortality))))
        elif task is TaskKind.READMISSION:
            for t in range(1, len(visits)):
                gap = visits[t].t_admit - visits[t - 1].t_admit
                out.append(Sample(p.id, t, int(gap <= window_days)))
        elif task is TaskKind.LOS:
            for t, v in enumerate(visits, 1):
                if v.los_days is not None:
                    out.append(Sample(p.id, t, los_class(v.los_days)))
        else:
            for t, v in enumerate(visits, 1):
                y = np.zeros(len(vocab))
                for c in v.codes:
                    if c.category is Category.DRUG and c.id in vocab:
                        y[vocab[c.id]] = 1.0
                out.append(Sample(p.id, t, y))
    return out


def split_patients(patient_ids: Sequence[str], ratios=(0.8, 0.1, 0.1),
                   seed: int = 0) -> tuple[list[str], list[str], list[str]]:
    """Shuffle unique patient ids and cut them by ``ratios``."""
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise ValueError("split ratios must be three numbers summing to 1")
    ids = sorted(set(patient_ids))
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    shuffled = [ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


class Dataset:
    """Samples for one task with their patient-graph structures precomputed."""

    def __init__(self, patients: Sequence[Patient], graph: GlobalGraph, task: TaskKind | str,
                 drug_vocab: Sequence[str] | None = None, max_visits: int | None = None):
        self.task_kind = TaskKind(task)
        self.graph = graph
        self.patients = {p.id: p for p in patients}
        self.drug_vocab = list(drug_vocab) if drug_vocab is not None else drug_vocabulary(patients)
        self.samples = make_samples(patients, self.task_kind, self.drug_vocab)
        longest = max((s.n_input for s in self.samples), default=1)
        self.max_visits = max_visits or longest
        self.categories = feature_categories(self.task_kind)
        self._structures: dict[int, GraphStructure] = {}

    def task_spec(self) -> TaskSpec:
        return TaskSpec.for_task(self.task_kind, n_drugs=len(self.drug_vocab))

    def __len__(self) -> int:
        return len(self.samples)

    def indices_for(self, patient_ids: Sequence[str]) -> list[int]:
        keep = set(patient_ids)
        return [i for i, s in enumerate(self.samples) if s.patient_id in keep]

    def structure(self, i: int) -> GraphStructure:
        st = self._structures.get(i)
        if st is None:
            s = self.samples[i]
            prefix = self.patients[s.patient_id].prefix(s.n_input)
            pg = compose_patient_graph(prefix, self.graph, self.max_visits, self.categories)
            # padded rows carry no attention mass, so drop them
            pg = pg.with_rows(pg.n_visits)
            st = build_structure(pg, self.graph)
            self._structures[i] = st
        return st

    def batch(self, idx: Sequence[int]) -> tuple[GraphBatch, np.ndarray]:
        b = collate([self.structure(i) for i in idx], self.graph)
        return b, self.labels(idx)

    def labels(self, idx: Sequence[int]) -> np.ndarray:
        if self.task_kind is TaskKind.LOS:
            return np.array([self.samples[i].label for i in idx], dtype=np.int64)
        return np.stack([self.samples[i].label_array() for i in idx])


# ---------------------------------------------------------------- optimizer

@dataclass
class TrainConfig:
    lr: float = 1e-5
    weight_decay: float = 1e-5
    batch_size: int = 4
    epochs: int = 50
    patience: int = 10
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.split = tuple(float(x) for x in self.split)
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        if self.patience > self.epochs:
            raise ValueError("patience cannot exceed epochs")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray | None],
              state: AdamState, config: TrainConfig) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; weight decay is added to the gradient."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if config.weight_decay:
            g = g + config.weight_decay * p
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        out[name] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return out


# ---------------------------------------------------------------- training

def monitor_score(task: TaskKind, y, proba) -> float:
    """Validation score used for early stopping; NaN when labels are degenerate."""
    try:
        if task is TaskKind.LOS:
            return metrics.auroc_macro_ovr(y, proba)
        if task is TaskKind.DRUGREC:
            return metrics.auroc_micro(y, proba)
        return metrics.auroc(y, proba)
    except metrics.DegenerateLabels:
        return float("nan")


@dataclass
class TrainResult:
    model: BatModel
    history: list[dict]
    best_epoch: int
    best_score: float
    splits: tuple[list[str], list[str], list[str]]


def predict(model: BatModel, data: Dataset, idx: Sequence[int], batch_size: int = 256) -> np.ndarray:
    chunks = []
    for lo in range(0, len(idx), batch_size):
        b, _ = data.batch(idx[lo: lo + batch_size])
        chunks.append(model.predict(b))
    if not chunks:
        return np.zeros((0, model.task.out_size))
    return np.vstack(chunks)


def mean_loss(model: BatModel, data: Dataset, idx: Sequence[int], batch_size: int = 256) -> float:
    total = 0.0
    for lo in range(0, len(idx), batch_size):
        chunk = idx[lo: lo + batch_size]
        b, y = data.batch(chunk)
        total += loss(model.forward(b), y, model.task).item() * len(chunk)
    return total / max(len(idx), 1)


def _score(model, data, idx, task):
    if not idx:
        return float("nan")
    proba = predict(model, data, idx)
    y = data.labels(idx)
    return monitor_score(task, y, proba[:, 0] if proba.shape[1] == 1 else proba)


def build_model(data: Dataset, config: ModelConfig, seed: int = 0,
                provider: EmbeddingProvider | None = None) -> BatModel:
    config.max_visits = data.max_visits
    task = data.task_spec()
    model = BatModel.for_graph(data.graph, config, task, seed)
    if provider is not None:
        model.init_attention(data.graph.node_embeddings, provider.get(task.term))
    return model


def train(data: Dataset, model: BatModel, config: TrainConfig,
          splits: tuple[list[str], list[str], list[str]] | None = None,
          track_train_score: bool = False) -> TrainResult:
    """Mini-batch Adam with early stopping on the validation monitor score."""
    if splits is None:
        splits = split_patients(list(data.patients), config.split, config.seed)
    train_idx = data.indices_for(splits[0])
    val_idx = data.indices_for(splits[1])
    if not train_idx:
        raise EmptyTrainingSet("no training samples")
    rng = np.random.default_rng(config.seed)
    state = AdamState()
    names = list(model.params)
    history: list[dict] = []
    best_state = model.state()
    best_score, best_epoch, stale = -math.inf, 0, 0
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_idx))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            chunk = [train_idx[k] for k in order[lo: lo + config.batch_size]]
            batch, y = data.batch(chunk)
            with T.Tape() as tape:
                value = loss(model.forward(batch), y, model.task)
            tape.backward(value)
            current = {k: model.params[k].data for k in names}
            grads = {k: model.params[k].grad for k in names}
            for k, v in adam_step(current, grads, state, config).items():
                model.params[k].data = v
                model.params[k].grad = None
            losses.append(value.item() * len(chunk))
        train_loss = float(np.sum(losses) / len(train_idx))
        score = _score(model, data, val_idx, data.task_kind)
        if math.isnan(score):
            score = -mean_loss(model, data, val_idx) if val_idx else -train_loss
        rec = {"epoch": epoch, "train_loss": train_loss, "val_score": score,
               "seconds": time.perf_counter() - t0}
        if track_train_score:
            rec["train_score"] = _score(model, data, train_idx, data.task_kind)
        history.append(rec)
        log.info("epoch %d loss %.5f val %.4f", epoch, train_loss, score)
        if score > best_score:
            best_score, best_epoch, stale = score, epoch, 0
            best_state = model.state()
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.load_state(best_state)
    return TrainResult(model, history, best_epoch, best_score, splits)


def evaluate(model: BatModel, data: Dataset, idx: Sequence[int]) -> dict:
    """Task-appropriate metric report for the samples ``idx``."""
    y = data.labels(idx)
    proba = predict(model, data, idx)
    kind = data.task_kind
    if kind is TaskKind.LOS:
        rep = metrics.multiclass_report(y, proba)
    elif kind is TaskKind.DRUGREC:
        rep = metrics.multilabel_report(y, proba)
    else:
        rep = metrics.binary_report(y[:, 0], proba[:, 0])
    rep["n_samples"] = len(idx)
    rep["loss"] = mean_loss(model, data, idx) if idx else None
    return rep


def train_config_json(config: TrainConfig) -> dict:
    d = asdict(config)
    d["split"] = list(config.split)
    return d
