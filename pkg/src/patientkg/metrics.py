"""Evaluation metrics: AUROC, AUPRC, accuracy, F1, Jaccard and Cohen's kappa."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


class DegenerateLabels(ValueError):
    pass


def _binary(y_true, y_score):
    y = np.asarray(y_true).reshape(-1)
    s = np.asarray(y_score, dtype=np.float64).reshape(-1)
    if y.shape != s.shape:
        raise ValueError("labels and scores differ in length")
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("need at least one positive and one negative label")
    return y, s, n_pos, n_neg


def auroc(y_true, y_score) -> float:
    """Mann-Whitney rank statistic with midranks for tied scores."""
    y, s, n_pos, n_neg = _binary(y_true, y_score)
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(y_true, y_score) -> float:
    """Average precision: precision summed at each recall step.

    Tied scores enter as one threshold.
    """
    y, s, n_pos, _ = _binary(y_true, y_score)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def accuracy(y_true, y_pred) -> float:
    y = np.asarray(y_true).reshape(-1)
    p = np.asarray(y_pred).reshape(-1)
    return float(np.mean(y == p))


def f1_binary(y_true, y_pred) -> float:
    y = np.asarray(y_true).reshape(-1).astype(bool)
    p = np.asarray(y_pred).reshape(-1).astype(bool)
    tp = np.sum(y & p)
    denom = 2 * tp + np.sum(y & ~p) + np.sum(~y & p)
    return float(2 * tp / denom) if denom else 1.0


def f1_macro(y_true, y_pred, n_classes: int) -> float:
    y = np.asarray(y_true).reshape(-1)
    p = np.asarray(y_pred).reshape(-1)
    scores = [f1_binary(y == c, p == c) for c in range(n_classes) if np.any(y == c) or np.any(p == c)]
    return float(np.mean(scores)) if scores else 1.0


def f1_samples(y_true, y_score, threshold: float = 0.5) -> float:
    """Example-based F1 for multi-label predictions, averaged over samples."""
    y = np.asarray(y_true).astype(bool)
    p = np.asarray(y_score) >= threshold
    tp = (y & p).sum(axis=1)
    denom = y.sum(axis=1) + p.sum(axis=1)
    per = np.where(denom > 0, 2 * tp / np.where(denom > 0, denom, 1), 1.0)
    return float(per.mean())


def jaccard_samples(y_true, y_score, threshold: float = 0.5) -> float:
    y = np.asarray(y_true).astype(bool)
    p = np.asarray(y_score) >= threshold
    inter = (y & p).sum(axis=1)
    union = (y | p).sum(axis=1)
    per = np.where(union > 0, inter / np.where(union > 0, union, 1), 1.0)
    return float(per.mean())


def cohen_kappa(y_true, y_pred, n_classes: int | None = None) -> float:
    y = np.asarray(y_true, dtype=np.int64).reshape(-1)
    p = np.asarray(y_pred, dtype=np.int64).reshape(-1)
    c = n_classes or int(max(y.max(), p.max())) + 1
    confusion = np.zeros((c, c))
    np.add.at(confusion, (y, p), 1.0)
    n = confusion.sum()
    observed = np.trace(confusion) / n
    expected = (confusion.sum(axis=1) @ confusion.sum(axis=0)) / (n * n)
    if expected == 1.0:
        return 1.0
    return float((observed - expected) / (1.0 - expected))


def auroc_macro_ovr(y_true, proba) -> float:
    """One-vs-rest AUROC averaged over classes with both outcomes present."""
    y = np.asarray(y_true).reshape(-1)
    proba = np.asarray(proba)
    scores = []
    for c in range(proba.shape[1]):
        pos = y == c
        if pos.any() and (~pos).any():
            scores.append(auroc(pos, proba[:, c]))
    if not scores:
        raise DegenerateLabels("no class has both positives and negatives")
    return float(np.mean(scores))


def auroc_micro(y_true, y_score) -> float:
    return auroc(np.asarray(y_true).ravel(), np.asarray(y_score).ravel())


def auroc_macro(y_true, y_score) -> float:
    y = np.asarray(y_true)
    s = np.asarray(y_score)
    scores = [auroc(y[:, k], s[:, k]) for k in range(y.shape[1])
              if 0 < y[:, k].sum() < y.shape[0]]
    if not scores:
        raise DegenerateLabels("no label column has both outcomes")
    return float(np.mean(scores))


def auprc_micro(y_true, y_score) -> float:
    return auprc(np.asarray(y_true).ravel(), np.asarray(y_score).ravel())


def _safe(fn, *args):
    try:
        return fn(*args)
    except DegenerateLabels:
        return None


def binary_report(y_true, proba, threshold: float = 0.5) -> dict:
    y = np.asarray(y_true).reshape(-1).astype(int)
    s = np.asarray(proba).reshape(-1)
    pred = (s >= threshold).astype(int)
    return {
        "auroc": _safe(auroc, y, s),
        "auprc": _safe(auprc, y, s),
        "accuracy": accuracy(y, pred),
        "f1": f1_binary(y, pred),
        "kappa": cohen_kappa(y, pred, 2),
    }


def multiclass_report(y_true, proba) -> dict:
    y = np.asarray(y_true).reshape(-1).astype(int)
    proba = np.asarray(proba)
    pred = proba.argmax(axis=1)
    c = proba.shape[1]
    return {
        "auroc_macro": _safe(auroc_macro_ovr, y, proba),
        "accuracy": accuracy(y, pred),
        "f1_macro": f1_macro(y, pred, c),
        "kappa": cohen_kappa(y, pred, c),
    }


def multilabel_report(y_true, proba, threshold: float = 0.5) -> dict:
    y = np.asarray(y_true)
    s = np.asarray(proba)
    return {
        "auroc_micro": _safe(auroc_micro, y, s),
        "auroc_macro": _safe(auroc_macro, y, s),
        "auprc_micro": _safe(auprc_micro, y, s),
        "f1": f1_samples(y, s, threshold),
        "jaccard": jaccard_samples(y, s, threshold),
    }
