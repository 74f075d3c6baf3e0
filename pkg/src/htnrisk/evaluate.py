"""Evaluation: carry-forward baseline, confusion metrics, ROC, AUROC.

The baseline predicts the most recent observed blood-pressure status.
ROC construction sweeps unique score thresholds in descending order with
ties grouped, so tied scores produce diagonal segments; AUROC is the
trapezoidal area and provably equals the Mann-Whitney statistic with
ties counted one half.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .artifacts import format_number
from .cohort import BpStatus, CohortSample, label_bp_status
from .ehr_core import DataError


def carry_forward_baseline(sample: CohortSample) -> tuple[int, float]:
    """Predict the last observed BP status; score is that status as 0/1.

    Walks the history backward to the most recent visit whose reading
    pair is labelable; a history with no readable BP at all is an error.
    """
    for enc in reversed(sample.history):
        status = label_bp_status(enc.systolic, enc.diastolic)
        if status is not None:
            return int(status), float(status)
    raise DataError(f"patient {sample.patient}: no labelable BP in history")


def confusion(labels, predictions) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with Uncontrolled(1) as the positive class."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError("labels and predictions must have equal length")
    if labels.size == 0:
        raise ValueError("empty input")
    tp = int(np.sum((labels == 1) & (predictions == 1)))
    fp = int(np.sum((labels == 0) & (predictions == 1)))
    tn = int(np.sum((labels == 0) & (predictions == 0)))
    fn = int(np.sum((labels == 1) & (predictions == 0)))
    return tp, fp, tn, fn


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def precision_recall_f1(tp: int, fp: int, tn: int, fn: int) -> dict:
    """Per-class and macro-averaged precision/recall/F1; 0/0 counts as 0."""
    pos = _prf(tp, fp, fn)
    neg = _prf(tn, fn, fp)  # negative class: swap the roles of the counts
    macro = tuple((a + b) / 2 for a, b in zip(pos, neg))
    return {
        "per_class": {
            "0": {"precision": neg[0], "recall": neg[1], "f1": neg[2]},
            "1": {"precision": pos[0], "recall": pos[1], "f1": pos[2]},
        },
        "macro": {"precision": macro[0], "recall": macro[1], "f1": macro[2]},
        "accuracy": (tp + tn) / (tp + fp + tn + fn),
    }


@dataclass
class RocCurve:
    """Threshold sweep: one point per unique score, ends pinned at the corners."""

    points: list[tuple[float, float]]  # (fpr, tpr), both non-decreasing
    thresholds: list[float]  # same length; leading point carries +inf

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["threshold", "fpr", "tpr"])
            for threshold, (fpr, tpr) in zip(self.thresholds, self.points):
                writer.writerow(
                    [format_number(threshold), format_number(fpr), format_number(tpr)]
                )


def roc_curve(labels, scores) -> RocCurve:
    """ROC points over descending unique thresholds, tie groups merged."""
    labels = np.asarray(labels, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = float(np.sum(labels == 1))
    n_neg = float(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0)]
    thresholds = [float("inf")]
    tp = fp = 0.0
    i = 0
    n = len(sorted_scores)
    while i < n:
        j = i
        while j < n and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += float(np.sum(sorted_labels[i:j] == 1))
        fp += float(np.sum(sorted_labels[i:j] == 0))
        points.append((fp / n_neg, tp / n_pos))
        thresholds.append(float(sorted_scores[i]))
        i = j
    return RocCurve(points=points, thresholds=thresholds)


def auroc(labels, scores) -> float:
    """Trapezoidal area under the ROC curve.

    Identical to the Mann-Whitney statistic: the probability a random
    positive outscores a random negative, ties counting one half.
    """
    curve = roc_curve(labels, scores)
    area = 0.0
    for (fpr0, tpr0), (fpr1, tpr1) in zip(curve.points, curve.points[1:]):
        area += (fpr1 - fpr0) * (tpr0 + tpr1) / 2.0
    return area


def grouped_report(labels, predictions, scores, groups=None) -> dict:
    """Metrics overall plus per-group sub-reports (AUROC on the total only).

    A group whose labels are single-class gets its metrics without AUROC
    and a `single_class` flag; the same guard applies to the total.
    """
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    scores = np.asarray(scores, dtype=np.float64)
    report = _basic_report(labels, predictions, scores, with_auroc=True)
    if groups is not None:
        groups = np.asarray(groups)
        report["groups"] = {}
        for value in sorted(set(groups.tolist())):
            member = groups == value
            report["groups"][str(value)] = _basic_report(
                labels[member], predictions[member], scores[member], with_auroc=False
            )
    return report


def _basic_report(labels, predictions, scores, with_auroc: bool) -> dict:
    tp, fp, tn, fn = confusion(labels, predictions)
    report = {
        "n": int(labels.size),
        "confusion": {"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        "metrics": precision_recall_f1(tp, fp, tn, fn),
    }
    single_class = len(set(np.asarray(labels).tolist())) < 2
    if single_class:
        report["single_class"] = True
    elif with_auroc:
        report["auroc"] = auroc(labels, scores)
    return report


def evaluate_scores(labels, scores, threshold: float = 0.5, groups=None) -> dict:
    """Full report from continuous scores: threshold, then group metrics."""
    scores = np.asarray(scores, dtype=np.float64)
    predictions = (scores >= threshold).astype(int)
    report = grouped_report(labels, predictions, scores, groups)
    report["threshold"] = threshold
    return report
