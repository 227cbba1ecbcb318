"""Regression and classification metrics (MAE, R^2, ACC, BACC, AUC)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


@dataclass
class RegressionReport:
    mae: float
    r2: float

    def to_dict(self):
        return {"mae": self.mae, "r2": self.r2}


@dataclass
class ClassificationReport:
    acc: float
    bacc: float
    auc: float
    classes: list = field(default_factory=list)
    confusion: np.ndarray | None = None  # rows: truth, cols: prediction

    def to_dict(self):
        return {"acc": self.acc, "bacc": self.bacc, "auc": self.auc, "classes": list(self.classes),
                "confusion": None if self.confusion is None else self.confusion.tolist()}


def regression_metrics(pred: Sequence[float], truth: Sequence[float]) -> RegressionReport:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.size < 2:
        raise ValueError("need at least two paired predictions")
    ss_tot = np.sum((truth - truth.mean()) ** 2)
    if ss_tot == 0:
        raise ValueError("truth has zero variance; R^2 undefined")
    err = pred - truth
    return RegressionReport(float(np.mean(np.abs(err))), float(1.0 - np.sum(err ** 2) / ss_tot))


def binary_auc(scores: Sequence[float], positive: Sequence[bool]) -> float:
    """Mann-Whitney AUC; tied scores earn half credit."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion_matrix(pred_labels, truth, classes) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(pred_labels, truth):
        cm[index[t], index[p]] += 1
    return cm


def classification_metrics(pred_labels: Sequence, scores: np.ndarray | None, truth: Sequence,
                           classes: Sequence | None = None) -> ClassificationReport:
    """ACC, balanced accuracy and AUC.

    ``scores`` is (N, n_classes) with columns in ``classes`` order (for two
    classes a 1-D score for ``classes[1]`` is accepted).  Multi-class AUC is the
    macro average of one-vs-rest AUCs.  Classes absent from ``truth`` are left
    out of the BACC/AUC means with a warning.
    """
    pred_labels = list(pred_labels)
    truth = list(truth)
    if len(pred_labels) != len(truth) or not truth:
        raise ValueError("pred_labels and truth must be non-empty and aligned")
    if classes is None:
        classes = sorted(set(truth) | set(pred_labels))
    classes = list(classes)
    cm = confusion_matrix(pred_labels, truth, classes)
    acc = float(np.trace(cm) / cm.sum())
    support = cm.sum(axis=1)
    present = support > 0
    if not present.all():
        warnings.warn(f"classes absent from truth excluded: {[c for c, p in zip(classes, present) if not p]}")
    recalls = np.diag(cm)[present] / support[present]
    bacc = float(recalls.mean())

    auc = float("nan")
    if scores is not None:
        scores = np.asarray(scores, dtype=np.float64)
        truth_arr = np.asarray(truth, dtype=object)
        if scores.ndim == 1:
            if len(classes) != 2:
                raise ValueError("1-D scores only allowed for two classes")
            auc = binary_auc(scores, truth_arr == classes[1])
        else:
            aucs = []
            for i, c in enumerate(classes):
                pos = truth_arr == c
                if pos.all() or not pos.any():
                    continue
                aucs.append(binary_auc(scores[:, i], pos))
            auc = float(np.mean(aucs)) if aucs else float("nan")
    return ClassificationReport(acc, bacc, auc, classes, cm)
