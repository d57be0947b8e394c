"""Classification metrics: confusion matrix, binary rates, ROC-AUC, micro/macro scores.

Undefined ratios (zero denominators, single-class AUC) are reported as
``None`` rather than silently coerced to 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    class_names: list

    @property
    def n(self):
        return int(self.counts.sum())

    def true_counts(self):
        return self.counts.sum(axis=1)

    def predicted_counts(self):
        return self.counts.sum(axis=0)

    def to_dict(self):
        return {"class_names": [str(c) for c in self.class_names], "counts": self.counts.tolist()}


def confusion_matrix(true_labels, pred_labels, class_names):
    """Rows are true classes, columns predicted classes, both in ``class_names`` order."""
    true_labels = list(true_labels)
    pred_labels = list(pred_labels)
    if len(true_labels) != len(pred_labels):
        raise ValueError(f"length mismatch: {len(true_labels)} true vs {len(pred_labels)} predicted")
    index = {c: i for i, c in enumerate(class_names)}
    unknown = {x for x in true_labels + pred_labels if x not in index}
    if unknown:
        raise ValueError(f"labels not in class_names: {sorted(map(str, unknown))}")
    counts = np.zeros((len(class_names), len(class_names)), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(counts, list(class_names))


def _ratio(num, den):
    return None if den == 0 else num / den


@dataclass
class BinaryMetrics:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    auc: float | None
    positive_class: object
    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    def as_dict(self):
        d = asdict(self)
        d["positive_class"] = str(self.positive_class)
        return d


def binary_metrics(cm, positive_class, auc=None):
    """Accuracy, sensitivity (TP rate) and specificity (TN rate) from a 2x2 matrix."""
    if cm.counts.shape != (2, 2):
        raise ValueError(f"binary metrics need a 2x2 matrix, got {cm.counts.shape}")
    p = cm.class_names.index(positive_class)
    q = 1 - p
    tp, fn = int(cm.counts[p, p]), int(cm.counts[p, q])
    tn, fp = int(cm.counts[q, q]), int(cm.counts[q, p])
    return BinaryMetrics(
        accuracy=_ratio(tp + tn, tp + tn + fp + fn),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        auc=auc,
        positive_class=positive_class,
        tp=tp, fn=fn, tn=tn, fp=fp,
    )


def _check_binary_scores(y_true, scores):
    y = np.asarray(y_true).astype(bool).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if y.shape != s.shape:
        raise ValueError(f"shape mismatch: {y.shape} labels vs {s.shape} scores")
    return y, s


def roc_auc(y_true, scores):
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Equals P(score_pos > score_neg) + 0.5 * P(tie); tied scores share their
    average rank.
    """
    y, s = _check_binary_scores(y_true, scores)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC is undefined with only one class present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(y_true, scores):
    """False/true positive rates at every distinct threshold, highest first."""
    y, s = _check_binary_scores(y_true, scores)
    order = np.argsort(-s, kind="mergesort")
    y, s = y[order], s[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size else np.array([], dtype=int)
    cut = np.r_[distinct, y.size - 1] if y.size else np.array([], dtype=int)
    tps = np.cumsum(y)[cut]
    fps = (cut + 1) - tps
    n_pos, n_neg = y.sum(), y.size - y.sum()
    tpr = np.r_[0.0, tps / n_pos] if n_pos else np.r_[0.0, np.zeros_like(tps, dtype=float)]
    fpr = np.r_[0.0, fps / n_neg] if n_neg else np.r_[0.0, np.zeros_like(fps, dtype=float)]
    return fpr, tpr


@dataclass
class MulticlassMetrics:
    class_names: list
    per_class_auc: dict
    per_class_precision: dict
    per_class_recall: dict
    per_class_f1: dict
    precision_micro: float
    precision_macro: float
    recall_micro: float
    f1_micro: float
    f1_macro: float
    auc_micro: float | None
    auc_macro: float | None
    accuracy: float
    confusion: ConfusionMatrix = field(repr=False, default=None)

    def as_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "confusion"}
        d["class_names"] = [str(c) for c in self.class_names]
        return d


def argmax_labels(prob_matrix, class_names):
    """Row-wise argmax; ``np.argmax`` returns the first maximum, i.e. the lowest class index."""
    probs = np.asarray(prob_matrix)
    return [class_names[i] for i in np.argmax(probs, axis=1)] if probs.size else []


def multiclass_metrics(true_labels, prob_matrix, class_names, pred_labels=None, *, atol=1e-4):
    """One-vs-rest AUCs plus micro/macro precision, F1 and AUC.

    Macro precision and F1 average over classes that occur in either the true
    or the predicted labels. A class absent from ``true_labels`` has no
    defined AUC; it is reported as ``None`` and left out of the macro AUC.
    """
    class_names = list(class_names)
    probs = np.asarray(prob_matrix, dtype=np.float64)
    true_labels = list(true_labels)
    if probs.ndim != 2 or probs.shape != (len(true_labels), len(class_names)):
        raise ValueError(
            f"prob_matrix must be (n, {len(class_names)}), got {probs.shape} for {len(true_labels)} labels"
        )
    if probs.size and not np.allclose(probs.sum(axis=1), 1.0, atol=atol):
        raise ValueError("probability rows must sum to 1")
    if pred_labels is None:
        pred_labels = argmax_labels(probs, class_names)
    cm = confusion_matrix(true_labels, pred_labels, class_names)
    n = cm.n
    tp = np.diag(cm.counts).astype(float)
    pred_tot = cm.predicted_counts().astype(float)
    true_tot = cm.true_counts().astype(float)

    precision, recall, f1, auc = {}, {}, {}, {}
    onehot = np.zeros_like(probs, dtype=bool)
    index = {c: i for i, c in enumerate(class_names)}
    for row, t in enumerate(true_labels):
        onehot[row, index[t]] = True
    for i, c in enumerate(class_names):
        p = tp[i] / pred_tot[i] if pred_tot[i] else 0.0
        r = tp[i] / true_tot[i] if true_tot[i] else 0.0
        precision[c] = p
        recall[c] = r if true_tot[i] else None
        f1[c] = 2 * p * r / (p + r) if (p + r) else 0.0
        try:
            auc[c] = roc_auc(onehot[:, i], probs[:, i])
        except UndefinedMetricError:
            auc[c] = None

    seen = [i for i, c in enumerate(class_names) if true_tot[i] or pred_tot[i]]
    absent = [c for c in class_names if auc[c] is None]
    if absent and n:
        warnings.warn(f"AUC undefined for classes {absent}; macro AUC averages the rest", stacklevel=2)
    defined_auc = [v for v in auc.values() if v is not None]

    micro = tp.sum() / n if n else 0.0
    try:
        auc_micro = roc_auc(onehot.ravel(), probs.ravel())
    except UndefinedMetricError:
        auc_micro = None
    return MulticlassMetrics(
        class_names=class_names,
        per_class_auc=auc,
        per_class_precision=precision,
        per_class_recall=recall,
        per_class_f1=f1,
        precision_micro=micro,
        precision_macro=float(np.mean([precision[class_names[i]] for i in seen])) if seen else 0.0,
        recall_micro=micro,
        f1_micro=micro,
        f1_macro=float(np.mean([f1[class_names[i]] for i in seen])) if seen else 0.0,
        auc_micro=auc_micro,
        auc_macro=float(np.mean(defined_auc)) if defined_auc else None,
        accuracy=micro,
        confusion=cm,
    )


def per_class_recall(cm):
    """Recall of every class (``None`` for classes with no true records)."""
    out = {}
    for i, c in enumerate(cm.class_names):
        total = cm.counts[i].sum()
        out[c] = None if total == 0 else float(cm.counts[i, i] / total)
    return out


@dataclass
class FoldAggregate:
    metric_name: str
    per_fold: list
    mean: float | None
    std: float | None

    def as_dict(self):
        return {"per_fold": list(self.per_fold), "mean": self.mean, "std": self.std}

    def format(self, scale=100.0, digits=2):
        if self.mean is None:
            return "n/a"
        if self.std is None:
            return f"{self.mean * scale:.{digits}f}"
        return f"{self.mean * scale:.{digits}f} ± {self.std * scale:.{digits}f}"


def aggregate_folds(per_fold, metric_name=""):
    """Mean and sample standard deviation (n - 1 denominator) across folds.

    ``None`` entries (metric undefined on a fold) are skipped.
    """
    values = [float(v) for v in per_fold if v is not None]
    if not values:
        return FoldAggregate(metric_name, list(per_fold), None, None)
    mean = math.fsum(values) / len(values)
    std = None
    if len(values) >= 2:
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1))
    return FoldAggregate(metric_name, list(per_fold), mean, std)
