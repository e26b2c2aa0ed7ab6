"""Binary (G0 vs fractured) and 4-grade evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

NUM_GRADES = 4

_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class MetricError(ValueError):
    pass


@dataclass
class EvalRecord:
    true_grade: int
    class_probabilities: tuple[float, float, float, float]

    def __post_init__(self):
        p = np.asarray(self.class_probabilities, dtype=np.float64)
        if p.shape != (NUM_GRADES,) or (p < 0).any() or abs(p.sum() - 1) > 1e-6:
            raise MetricError(f"class probabilities must be 4 non-negative values summing "
                              f"to 1, got {self.class_probabilities}")
        self.class_probabilities = tuple(float(x) for x in p)
        self.true_grade = int(self.true_grade)

    @property
    def predicted_grade(self) -> int:
        return int(np.argmax(self.class_probabilities))


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def fracture_score(probs, mode: str = "one_minus_g0") -> float:
    p = np.asarray(probs, dtype=np.float64)
    if mode == "one_minus_g0":
        return float(p[1:].sum())
    if mode == "max_fractured":
        return float(p[1:].max())
    raise MetricError(f"unknown score mode {mode!r}")


def collapse_binary(record: EvalRecord, mode: str = "one_minus_g0") -> tuple[int, float]:
    """``(grade != G0, fracture score)`` for one record."""
    return int(record.true_grade != 0), fracture_score(record.class_probabilities, mode)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied scores count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC undefined: need both positive and negative samples")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    """ROC points at every distinct score threshold, from (0,0) to (1,1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC undefined: need both positive and negative samples")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s[last]]
    return RocCurve(fpr, tpr, thresholds, float(_trapezoid(tpr, fpr)))


def confusion_matrix(true, pred, num_classes: int = NUM_GRADES) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(true, pred):
        cm[int(t), int(p)] += 1
    return cm


def sensitivity_specificity(records) -> tuple[float, float]:
    """Argmax predictions collapsed to fractured/normal."""
    true = np.array([r.true_grade != 0 for r in records])
    pred = np.array([r.predicted_grade != 0 for r in records])
    if not true.any():
        raise MetricError("sensitivity undefined: no fractured vertebrae")
    if true.all():
        raise MetricError("specificity undefined: no G0 vertebrae")
    tp = np.sum(true & pred)
    tn = np.sum(~true & ~pred)
    return float(tp / true.sum()), float(tn / (~true).sum())


def per_class_prf(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(pred_tot > 0, tp / pred_tot, 0.0)
        recall = np.where(true_tot > 0, tp / true_tot, 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


def macro_prf(true, pred, num_classes: int = NUM_GRADES) -> tuple[float, float, float]:
    """Unweighted means of per-class precision, recall and F1.

    Classes absent from both truth and prediction count as 0 and trigger a warning.
    """
    cm = confusion_matrix(true, pred, num_classes)
    absent = [c for c in range(num_classes) if cm[c].sum() == 0 and cm[:, c].sum() == 0]
    if absent:
        warnings.warn(f"classes {absent} absent from truth and prediction; counted as 0")
    p, r, f = per_class_prf(cm)
    return float(p.mean()), float(r.mean()), float(f.mean())


def macro_prf_records(records, num_classes: int = NUM_GRADES):
    return macro_prf([r.true_grade for r in records], [r.predicted_grade for r in records],
                     num_classes)


def within_class_similarity(embeddings, labels) -> float:
    """Mean cosine similarity over distinct same-label pairs."""
    z = np.asarray(embeddings, dtype=np.float64)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    labels = np.asarray(labels)
    sims = z @ z.T
    same = (labels[:, None] == labels[None, :]) & ~np.eye(len(labels), dtype=bool)
    if not same.any():
        raise MetricError("no same-class pairs")
    return float(sims[same].mean())


def evaluate(records, score_mode: str = "one_minus_g0") -> dict:
    """All headline metrics plus confusion matrix and ROC points."""
    binary = [collapse_binary(r, score_mode) for r in records]
    y = [b[0] for b in binary]
    s = [b[1] for b in binary]
    roc = roc_curve(s, y)
    sen, spe = sensitivity_specificity(records)
    mp, mr, mf = macro_prf_records(records)
    cm = confusion_matrix([r.true_grade for r in records], [r.predicted_grade for r in records])
    return {
        "n": len(records),
        "auc_roc": auc_roc(s, y),
        "specificity": spe,
        "sensitivity": sen,
        "macro_f1": mf,
        "macro_precision": mp,
        "macro_recall": mr,
        "score_mode": score_mode,
        "confusion_matrix": cm.tolist(),
        "roc": {"fpr": roc.fpr.tolist(), "tpr": roc.tpr.tolist(),
                "thresholds": [None if not np.isfinite(t) else float(t) for t in roc.thresholds]},
    }
