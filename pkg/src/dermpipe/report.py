"""Fold-level evaluation and report rendering (JSON, confusion heatmap, ROC plots)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .data import get_task
from .io import atomic_write_text
from .metrics import (
    UndefinedMetricError,
    aggregate_folds,
    binary_metrics,
    confusion_matrix,
    multiclass_metrics,
    per_class_recall,
    roc_auc,
    roc_curve,
)

BINARY_METRICS = ("accuracy", "sensitivity", "specificity", "auc")
MULTICLASS_METRICS = (
    "accuracy", "precision_micro", "precision_macro", "f1_micro", "f1_macro", "auc_micro", "auc_macro",
)


def score_columns(labels):
    return [f"score_{c}" for c in labels]


def prediction_frame(ids, true_labels, pred_labels, probs, labels):
    """Per-record predictions: ``image_id,true_label,pred_label,score_<class>...``.

    ``probs`` is ``(n,)`` positive-class scores for binary tasks or ``(n, k)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = np.column_stack([1.0 - probs, probs])
    df = pd.DataFrame({"image_id": list(ids), "true_label": list(true_labels), "pred_label": list(pred_labels)})
    for col, values in zip(score_columns(labels), probs.T):
        df[col] = values
    return df


@dataclass
class EvaluationResult:
    task: str
    labels: list
    fold_frames: list
    metrics: dict = field(default_factory=dict)
    confusion: object = None
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "task": self.task,
            "folds": len(self.fold_frames),
            "metrics": {k: v for k, v in self.metrics.items()},
            "confusion_matrix": self.confusion.to_dict(),
            "per_class": self.per_class,
        }

    def to_json(self):
        return json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def _agg_entry(values, name):
    agg = aggregate_folds(values, name)
    d = agg.as_dict()
    d["mean ± std"] = agg.format()
    return d


def evaluate_folds(fold_frames, task):
    """Metrics per fold, their mean ± sample std, and the pooled confusion matrix.

    Binary tasks report accuracy, sensitivity, specificity and AUC with the
    task's positive class, plus per-class recall ("detection accuracy").
    The 7-class task reports micro/macro precision, F1 and AUC and
    per-class one-vs-rest AUC.
    """
    task = get_task(task)
    labels = list(task.labels)
    cols = score_columns(labels)
    result = EvaluationResult(task.task_id, labels, list(fold_frames))
    per_fold: dict[str, list] = {}
    recalls: dict[str, list] = {c: [] for c in labels}
    pooled = None
    for df in fold_frames:
        cm = confusion_matrix(df["true_label"], df["pred_label"], labels)
        pooled = cm.counts if pooled is None else pooled + cm.counts
        for c, r in per_class_recall(cm).items():
            recalls[c].append(r)
        if task.is_binary:
            y = (df["true_label"] == task.positive_class).to_numpy()
            try:
                auc = roc_auc(y, df[f"score_{task.positive_class}"])
            except UndefinedMetricError:
                auc = None
            m = binary_metrics(cm, task.positive_class, auc)
            for name in BINARY_METRICS:
                per_fold.setdefault(name, []).append(getattr(m, name))
        else:
            mm = multiclass_metrics(df["true_label"], df[cols].to_numpy(), labels, list(df["pred_label"]))
            for name in MULTICLASS_METRICS:
                per_fold.setdefault(name, []).append(getattr(mm, name))

    result.metrics = {name: _agg_entry(v, name) for name, v in per_fold.items()}
    result.confusion = confusion_matrix([], [], labels)
    if pooled is not None:
        result.confusion.counts = pooled
    result.per_class = {c: {"recall": _agg_entry(recalls[c], f"recall_{c}")} for c in labels}
    if not task.is_binary:
        all_df = pd.concat(fold_frames, ignore_index=True)
        mm = multiclass_metrics(all_df["true_label"], all_df[cols].to_numpy(), labels, list(all_df["pred_label"]))
        for c in labels:
            result.per_class[c].update(
                auc=mm.per_class_auc[c], precision=mm.per_class_precision[c], f1=mm.per_class_f1[c],
            )
    return result


def render_report(result, out_dir):
    """Write ``report_<task>.json``, ``cm_<task>.png`` and ``roc_<task>_<class>.png`` files.

    Binary tasks get one ROC plot (positive class); multiclass tasks one
    one-vs-rest plot per class. Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / f"report_{result.task}.json"
    atomic_write_text(json_path, result.to_json())
    paths = [json_path, _plot_confusion(result, out_dir)]
    task = get_task(result.task)
    targets = [task.positive_class] if task.is_binary else result.labels
    all_df = pd.concat(result.fold_frames, ignore_index=True)
    for c in targets:
        paths.append(_plot_roc(result.task, c, all_df, out_dir))
    return paths


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, plt, path):
    fig.savefig(path, format="png", metadata={"Software": None}, dpi=100)
    plt.close(fig)
    return path


def _plot_confusion(result, out_dir):
    plt = _figure()
    counts = result.confusion.counts
    fig, ax = plt.subplots(figsize=(1.0 + 0.8 * len(result.labels), 0.8 + 0.8 * len(result.labels)))
    ax.imshow(counts, cmap="Blues")
    ax.set_xticks(range(len(result.labels)), result.labels, rotation=45, ha="right")
    ax.set_yticks(range(len(result.labels)), result.labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    hi = counts.max() if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if hi and counts[i, j] > hi / 2 else "black")
    ax.set_title(result.task)
    fig.tight_layout()
    return _save(fig, plt, out_dir / f"cm_{result.task}.png")


def _plot_roc(task_id, cls, df, out_dir):
    plt = _figure()
    y = (df["true_label"] == cls).to_numpy()
    s = df[f"score_{cls}"].to_numpy()
    fig, ax = plt.subplots(figsize=(4, 4))
    if y.any() and (~y).any():
        fpr, tpr = roc_curve(y, s)
        ax.plot(fpr, tpr, label=f"AUC = {roc_auc(y, s):.4f}")
        ax.legend(loc="lower right")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(f"{task_id}: {cls} vs rest")
    fig.tight_layout()
    return _save(fig, plt, out_dir / f"roc_{task_id}_{cls}.png")
