"""Confusion counts, the six classification metrics, and ROC/AUC."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with ILD as the positive class."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @classmethod
    def from_predictions(cls, y_true, y_pred):
        t = np.asarray(y_true).astype(bool)
        p = np.asarray(y_pred).astype(bool)
        if t.shape != p.shape:
            raise ValueError("y_true and y_pred differ in length")
        return cls(tp=int(np.sum(t & p)), tn=int(np.sum(~t & ~p)),
                   fp=int(np.sum(~t & p)), fn=int(np.sum(t & ~p)))

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def as_matrix(self):
        """[[TN, FP], [FN, TP]]: rows true Healthy/ILD, columns predicted."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])

    def class_error_rates(self):
        """Per-class misclassification rate, None when a class is absent."""
        h, i = self.tn + self.fp, self.tp + self.fn
        return {"Healthy": self.fp / h if h else None, "ILD": self.fn / i if i else None}


@dataclass
class MetricsReport:
    # None marks a metric whose denominator is zero
    acc: float | None
    sns: float | None
    spf: float | None
    pre: float | None
    icbhi: float | None
    f1: float | None
    auc: dict = field(default_factory=dict)
    confusion: ConfusionMatrix | None = None

    @property
    def rcl(self):
        return self.sns

    def to_dict(self):
        d = {k: getattr(self, k) for k in ("acc", "sns", "spf", "pre", "icbhi", "f1")}
        d["rcl"] = self.sns
        d["auc"] = dict(self.auc)
        if self.confusion is not None:
            d["confusion"] = asdict(self.confusion)
            d["class_error_rates"] = self.confusion.class_error_rates()
        return d


def _ratio(num, den):
    return num / den if den else None


def compute_metrics(cm):
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    acc = (cm.tp + cm.tn) / cm.total
    sns = _ratio(cm.tp, cm.tp + cm.fn)
    spf = _ratio(cm.tn, cm.tn + cm.fp)
    pre = _ratio(cm.tp, cm.tp + cm.fp)
    icbhi = (sns + spf) / 2 if sns is not None and spf is not None else None
    if pre is None or sns is None or pre + sns == 0:
        f1 = None
    else:
        f1 = 2 * pre * sns / (pre + sns)
    return MetricsReport(acc, sns, spf, pre, icbhi, f1, confusion=cm)


def roc_auc(scores, labels):
    """ROC points over every distinct threshold and the midrank AUC.

    Returns ``(fpr, tpr, thresholds, auc)``; the curve starts at (0, 0).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes present")
    ranks = rankdata(s)  # average ranks for ties
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)

    thresholds = np.unique(s)[::-1]
    tpr = [0.0]
    fpr = [0.0]
    for t in thresholds:
        pred = s >= t
        tpr.append(np.sum(pred & y) / n_pos)
        fpr.append(np.sum(pred & ~y) / n_neg)
    thr = np.concatenate([[np.inf], thresholds])
    return np.array(fpr), np.array(tpr), thr, float(auc)


def write_metrics_json(path, report, extra=None):
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_csv(path, report):
    d = report.to_dict()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key in ("acc", "sns", "spf", "pre", "icbhi", "f1"):
            w.writerow([key, "undefined" if d[key] is None else f"{d[key]:.6f}"])
        for cls, v in d["auc"].items():
            w.writerow([f"auc_{cls}", f"{v:.6f}"])


def write_roc_csv(path, fpr, tpr, thresholds):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(thresholds, fpr, tpr):
            w.writerow([t, f"{f:.6f}", f"{p:.6f}"])
