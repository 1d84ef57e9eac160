"""Calibration metrics: accuracy, ECE, normalized Brier score, NLL.

Confidence bins are ``[i/K, (i+1)/K)`` with the last bin closed at 1.0.
Empty bins report ``avg_conf = acc = 0`` and contribute nothing to ECE.

Per-class rows condition on the *ground-truth* class: a row's accuracy and
average confidence are taken over the samples whose true label is that class,
and its ECE re-bins only those samples. (Conditioning on the predicted class
is the other common convention; it is not what this module reports.)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from calibkit.dataset import DataError
from calibkit.numerics import argmax_rows

ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class BinStats:
    lo: float
    hi: float
    count: int
    avg_conf: float
    acc: float

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "count": self.count,
                "avg_conf": self.avg_conf, "acc": self.acc}


@dataclass(frozen=True)
class PerClassRow:
    index: int
    name: Optional[str]
    support: int
    acc: Optional[float]
    avg_conf: Optional[float]
    delta_acc: Optional[float]
    ece: Optional[float]

    def to_dict(self) -> dict:
        return {"index": self.index, "name": self.name, "support": self.support, "acc": self.acc,
                "avg_conf": self.avg_conf, "delta_acc": self.delta_acc, "ece": self.ece}


@dataclass(frozen=True)
class CalibrationReport:
    ece: float
    brier: float
    nll: float
    accuracy: float
    n_total: int
    bins: tuple[BinStats, ...]
    per_class: tuple[PerClassRow, ...] = field(default_factory=tuple)

    @property
    def mean_confidence(self) -> float:
        return sum(b.count * b.avg_conf for b in self.bins) / self.n_total

    def to_dict(self) -> dict:
        return {
            "ece": self.ece,
            "brier": self.brier,
            "nll": self.nll,
            "accuracy": self.accuracy,
            "n_total": self.n_total,
            "bins": [b.to_dict() for b in self.bins],
            "per_class": [r.to_dict() for r in self.per_class],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationReport":
        bins = tuple(BinStats(float(b["lo"]), float(b["hi"]), int(b["count"]),
                              float(b["avg_conf"]), float(b["acc"])) for b in d["bins"])
        rows = tuple(PerClassRow(int(r["index"]), r.get("name"), int(r["support"]), r.get("acc"),
                                 r.get("avg_conf"), r.get("delta_acc"), r.get("ece"))
                     for r in d.get("per_class", []))
        return cls(float(d["ece"]), float(d["brier"]), float(d["nll"]), float(d["accuracy"]),
                   int(d["n_total"]), bins, rows)


def _check_probs(probs) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] < 1:
        raise ValueError(f"probabilities must be a 2-D array, got shape {probs.shape}")
    bad = np.flatnonzero(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOL)
    if len(bad):
        raise ValueError(f"probability row {int(bad[0])} does not sum to 1 (sum={probs[bad[0]].sum()!r})")
    bad = np.flatnonzero(np.any((probs < 0) | (probs > 1), axis=1))
    if len(bad):
        raise ValueError(f"probability row {int(bad[0])} has entries outside [0, 1]")
    return probs


def _check_labels(labels, m: int, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= m)):
        raise ValueError(f"label out of range at row {int(np.flatnonzero((labels < 0) | (labels >= m))[0])}")
    return labels.astype(np.int64)


def predict(probs) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (lowest index on ties) and its probability, per row."""
    probs = _check_probs(probs)
    pred = argmax_rows(probs)
    return pred, probs[np.arange(len(pred)), pred]


def reliability_bins(confidences, correct, n_bins: int = 10) -> list[BinStats]:
    confidences = np.asarray(confidences, dtype=np.float64)
    correct = np.asarray(correct, dtype=bool)
    if n_bins < 1:
        raise ValueError(f"bin count must be >= 1, got {n_bins}")
    if confidences.shape != correct.shape or confidences.ndim != 1:
        raise ValueError("confidences and correct must be 1-D arrays of equal length")
    outside = np.flatnonzero(~((confidences >= 0.0) & (confidences <= 1.0)))
    if len(outside):
        raise ValueError(f"confidence outside [0, 1] at index {int(outside[0])}: {confidences[outside[0]]!r}")
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.searchsorted(edges, confidences, side="right") - 1
    idx = np.minimum(idx, n_bins - 1)
    bins = []
    for i in range(n_bins):
        mask = idx == i
        count = int(mask.sum())
        if count:
            avg_conf = float(np.sum(confidences[mask]) / count)
            acc = float(np.sum(correct[mask]) / count)
        else:
            avg_conf = acc = 0.0
        bins.append(BinStats(float(edges[i]), float(edges[i + 1]), count, avg_conf, acc))
    return bins


def ece(bins: Sequence[BinStats], n_total: int) -> float:
    """Count-weighted mean of |accuracy - confidence| over bins."""
    if n_total < 1:
        raise ValueError("ECE needs n_total >= 1")
    if sum(b.count for b in bins) != n_total:
        raise ValueError("bin counts do not add up to n_total")
    total = 0.0
    for b in bins:
        if b.count:
            total += (b.count / n_total) * abs(b.acc - b.avg_conf)
    return total


def brier(probs, labels) -> float:
    """Brier score normalised to [0, 1]: squared error to one-hot truth over 2N."""
    probs = _check_probs(probs)
    n, m = probs.shape
    labels = _check_labels(labels, m, n)
    onehot = np.zeros_like(probs)
    onehot[np.arange(n), labels] = 1.0
    return float(np.sum((onehot - probs) ** 2) / (2 * n))


def nll(log_probs, labels) -> float:
    """Mean negative log-probability of the true class.

    Takes log-probabilities (e.g. ``log_softmax`` of scaled logits) so no
    probability is ever passed through ``log``.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n, m = log_probs.shape
    labels = _check_labels(labels, m, n)
    return float(-np.mean(log_probs[np.arange(n), labels]))


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    return float(np.sum(pred == np.asarray(labels)) / len(pred))


def per_class_rows(confidences, pred, labels, n_classes: int, n_bins: int = 10,
                   class_names: Optional[Sequence[str]] = None) -> list[PerClassRow]:
    rows = []
    for c in range(n_classes):
        mask = labels == c
        support = int(mask.sum())
        name = None if class_names is None else class_names[c]
        if support == 0:
            rows.append(PerClassRow(c, name, 0, None, None, None, None))
            continue
        conf_c = confidences[mask]
        correct_c = pred[mask] == c
        acc = float(np.sum(correct_c) / support)
        avg_conf = float(np.sum(conf_c) / support)
        ece_c = ece(reliability_bins(conf_c, correct_c, n_bins), support)
        rows.append(PerClassRow(c, name, support, acc, avg_conf, avg_conf - acc, ece_c))
    return rows


def report_from_scores(log_probs, labels, n_bins: int = 10,
                       class_names: Optional[Sequence[str]] = None, pred=None) -> CalibrationReport:
    """Build a full report from per-sample log-probabilities.

    ``pred`` optionally fixes the predicted class per row; confidence is then
    the probability of that class. Calibrators pass the argmax of the raw
    logits here: rescaling can round two nearly equal logits to an exact
    probability tie, and the tie rule must not turn that into a different
    prediction.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    n, m = log_probs.shape
    labels = _check_labels(labels, m, n)
    probs = np.exp(log_probs)
    if pred is None:
        pred, conf = predict(probs)
    else:
        _check_probs(probs)
        pred = np.asarray(pred, dtype=np.int64)
        conf = probs[np.arange(n), pred]
    correct = pred == labels
    bins = reliability_bins(conf, correct, n_bins)
    return CalibrationReport(
        ece=ece(bins, n),
        brier=brier(probs, labels),
        nll=nll(log_probs, labels),
        accuracy=accuracy(pred, labels),
        n_total=n,
        bins=tuple(bins),
        per_class=tuple(per_class_rows(conf, pred, labels, m, n_bins, class_names)),
    )


def full_report(samples, calibrator, n_bins: int = 10) -> CalibrationReport:
    """Apply ``calibrator`` to a sample set and compute every metric."""
    if calibrator.requires_features and samples.features is None:
        raise DataError("features required by the CARING calibrator")
    log_probs = calibrator.log_probs(samples.logits, samples.features)
    return report_from_scores(log_probs, samples.labels, n_bins, samples.class_names,
                              pred=argmax_rows(samples.logits))
