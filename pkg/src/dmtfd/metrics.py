"""Threshold-free ranking metrics and a quantile threshold rule."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata


def _check(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be 1-D and equally long")
    return scores, labels


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores, labels = _check(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative label")
    ranks = rankdata(scores)  # average ranks handle ties
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _sweep(scores, labels):
    """Cumulative (tp, fp) at each distinct threshold, highest score first."""
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64), s[ends]


def roc_curve(scores, labels):
    scores, labels = _check(scores, labels)
    tp, fp, thr = _sweep(scores, labels)
    n_pos, n_neg = tp[-1], fp[-1]
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes")
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return fpr, tpr, np.r_[np.inf, thr]


def pr_curve(scores, labels):
    scores, labels = _check(scores, labels)
    tp, fp, thr = _sweep(scores, labels)
    if tp[-1] == 0:
        raise ValueError("precision-recall needs at least one positive label")
    recall = np.r_[0.0, tp / tp[-1]]
    precision = np.r_[1.0, tp / (tp + fp)]
    return recall, precision, np.r_[np.inf, thr]


def auprc(scores, labels) -> float:
    """Average precision: sum of precision * recall increment, tied scores as one step."""
    recall, precision, _ = pr_curve(scores, labels)
    return float(np.sum(np.diff(recall) * precision[1:]))


def trapezoid_area(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2))


def threshold_detect(scores, train_scores, quantile: float = 0.95) -> np.ndarray:
    """Flag scores above the ``quantile`` of training scores.

    The threshold uses linear interpolation between order statistics
    (numpy's default ``"linear"`` method).
    """
    if not 0.0 < quantile < 1.0:
        raise ValueError("quantile must lie in (0, 1)")
    train_scores = np.asarray(train_scores, dtype=np.float64)
    if train_scores.size == 0:
        raise ValueError("no training scores to set a threshold from")
    theta = np.quantile(train_scores, quantile)
    return (np.asarray(scores, dtype=np.float64) > theta).astype(np.int64)


@dataclass
class EvalReport:
    scores: np.ndarray
    labels: np.ndarray
    auroc: float
    auprc: float
    roc_points: np.ndarray  # (n, 2) fpr, tpr
    pr_points: np.ndarray  # (n, 2) recall, precision
    window_starts: np.ndarray | None = None

    @classmethod
    def from_scores(cls, scores, labels, window_starts=None) -> "EvalReport":
        scores, labels = _check(scores, labels)
        fpr, tpr, _ = roc_curve(scores, labels)
        rec, prec, _ = pr_curve(scores, labels)
        return cls(
            scores=scores,
            labels=labels,
            auroc=auroc(scores, labels),
            auprc=auprc(scores, labels),
            roc_points=np.column_stack([fpr, tpr]),
            pr_points=np.column_stack([rec, prec]),
            window_starts=window_starts,
        )

    def metrics(self) -> dict:
        return {
            "auroc": self.auroc,
            "auprc": self.auprc,
            "n_windows": int(len(self.scores)),
            "n_anomalous": int(self.labels.sum()),
        }

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.metrics(), indent=2, sort_keys=True) + "\n")
        _write_rows(out / "roc.csv", ("fpr", "tpr"), self.roc_points)
        _write_rows(out / "pr.csv", ("recall", "precision"), self.pr_points)
        starts = self.window_starts if self.window_starts is not None else np.arange(len(self.scores))
        write_scores(out / "scores.csv", starts, self.scores, self.labels)


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) for v in row])


def write_scores(path, starts, scores, labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window_start", "score", "label"])
        for i, (st, sc) in enumerate(zip(starts, scores)):
            w.writerow([int(st), repr(float(sc)), "" if labels is None else int(labels[i])])
