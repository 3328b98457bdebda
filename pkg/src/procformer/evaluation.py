"""Metrics and the per-prefix-length evaluation protocol."""
import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyInput, EmptyTestSet
from .features import check_task


def _pair(predictions, targets):
    p, t = np.asarray(predictions), np.asarray(targets)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError(f"predictions {p.shape} and targets {t.shape} must be equal 1-d shapes")
    if p.size == 0:
        raise EmptyInput("metrics need at least one sample")
    return p, t


def accuracy(predictions, targets):
    p, t = _pair(predictions, targets)
    return float(np.count_nonzero(p == t)) / p.size


def confusion_matrix(predictions, targets, num_classes):
    """Rows are true classes, columns predicted classes."""
    p, t = _pair(predictions, targets)
    p, t = p.astype(np.int64), t.astype(np.int64)
    if min(p.min(), t.min()) < 0 or max(p.max(), t.max()) >= num_classes:
        raise ValueError(f"class ids must lie in [0, {num_classes})")
    return np.bincount(t * num_classes + p, minlength=num_classes ** 2).reshape(
        num_classes, num_classes)


def weighted_f_score(predictions, targets, num_classes):
    """Support-weighted mean of per-class F1 (undefined ratios count as 0)."""
    cm = confusion_matrix(predictions, targets, num_classes).astype(np.float64)
    tp = np.diag(cm)
    pred_count = cm.sum(axis=0)
    support = cm.sum(axis=1)
    precision = np.divide(tp, pred_count, out=np.zeros_like(tp), where=pred_count > 0)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    denom = precision + recall
    f = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return float((support * f).sum() / support.sum())


def mae(predictions, targets):
    p, t = _pair(predictions, targets)
    return float(np.mean(np.abs(p.astype(np.float64) - t.astype(np.float64))))


@dataclass
class EvalReport:
    task: str
    per_k: dict = field(default_factory=dict)  # k -> {"count": n, metric: value, ...}
    averaged: dict = field(default_factory=dict)
    overall: dict = field(default_factory=dict)

    @property
    def metric_names(self):
        return ["accuracy", "f_score"] if self.task == "next_activity" else ["mae"]

    @property
    def headline(self):
        name = self.metric_names[0]
        return name, self.averaged[name]

    def to_dict(self):
        return {
            "task": self.task,
            "per_k": {str(k): v for k, v in sorted(self.per_k.items())},
            "averaged": self.averaged,
            "overall": self.overall,
        }

    def write_json(self, stream):
        json.dump(self.to_dict(), stream, indent=2, sort_keys=True)
        stream.write("\n")

    def write_csv(self, stream):
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["k", "count", *self.metric_names])
        for k, row in sorted(self.per_k.items()):
            writer.writerow([k, row["count"], *(repr(row[m]) for m in self.metric_names)])


def _metrics(task, pred, target, num_classes):
    if task == "next_activity":
        return {"accuracy": accuracy(pred, target),
                "f_score": weighted_f_score(pred, target, num_classes)}
    return {"mae": mae(pred, target)}


def report_from_predictions(task, predictions, targets, prefix_lengths, num_classes=None):
    """Group by prefix length, score each group, and average groups unweighted."""
    check_task(task)
    predictions, targets = np.asarray(predictions), np.asarray(targets)
    ks = np.asarray(prefix_lengths)
    if predictions.size == 0:
        raise EmptyTestSet("no test samples to evaluate")
    if num_classes is None and task == "next_activity":
        num_classes = int(max(predictions.max(), targets.max())) + 1
    report = EvalReport(task)
    for k in np.unique(ks):
        sel = ks == k
        report.per_k[int(k)] = {"count": int(sel.sum()),
                                **_metrics(task, predictions[sel], targets[sel], num_classes)}
    for name in report.metric_names:
        report.averaged[name] = float(np.mean([row[name] for row in report.per_k.values()]))
    report.overall = {"count": int(predictions.size),
                      **_metrics(task, predictions, targets, num_classes)}
    return report


def evaluate_per_prefix(model, dataset, task=None):
    """Score a fitted estimator on a prefix :class:`~procformer.features.Dataset`."""
    task = task or model.task
    if task != model.task:
        raise ValueError(f"model was trained for {model.task!r}, not {task!r}")
    if len(dataset) == 0:
        raise EmptyTestSet("no test samples to evaluate")
    pred = model.predict(dataset.X)
    return report_from_predictions(task, pred, dataset.y(task), dataset.prefix_len,
                                   dataset.vocab_size + 2)
