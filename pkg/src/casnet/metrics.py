"""Pedestrian-attribute metrics: label-based mA and instance-based Acc/Prec/Rec/F1."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from casnet.tensor import Tensor

log = logging.getLogger(__name__)

METRIC_NAMES = ("mA", "accuracy", "precision", "recall", "f1")


@dataclass(frozen=True)
class MetricReport:
    mA: float
    instance_accuracy: float
    instance_precision: float
    instance_recall: float
    instance_f1: float
    per_attribute: list[tuple[int, int, int, int]] = field(default_factory=list, repr=False)
    excluded: tuple[int, ...] = ()

    def values(self) -> tuple[float, float, float, float, float]:
        return (self.mA, self.instance_accuracy, self.instance_precision,
                self.instance_recall, self.instance_f1)

    def as_dict(self) -> dict:
        return dict(zip(METRIC_NAMES, self.values()))

    def to_row(self, run_id: str, sep: str = ",") -> str:
        """Delimited results-table row: run id then the five metrics."""
        return sep.join([run_id, *(f"{v:.6f}" for v in self.values())])

    @staticmethod
    def header(sep: str = ",") -> str:
        return sep.join(["run_id", *METRIC_NAMES])

    @classmethod
    def from_row(cls, line: str, sep: str = ",") -> tuple[str, "MetricReport"]:
        parts = line.rstrip("\n").split(sep)
        if len(parts) != 6:
            raise ValueError(f"expected 6 fields, got {len(parts)}: {line!r}")
        return parts[0], cls(*(float(v) for v in parts[1:]))


def evaluate(scores, targets, threshold: float = 0.5) -> MetricReport:
    """Score (N, L) probabilities against binary targets.

    Degenerate cases: an attribute with no positives or no negatives is left
    out of mA (logged); for a sample, empty union gives accuracy 1, no
    predicted positives gives precision 1 only if there are also no true
    positives (else 0), and no true positives gives recall 1.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    y = np.asarray(targets).astype(bool)
    s = s.reshape(s.shape[0], -1)
    y = y.reshape(y.shape[0], -1)
    if s.shape != y.shape:
        raise ValueError(f"scores {s.shape} and targets {y.shape} disagree")
    pred = s >= threshold

    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    tn = (~pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    pos, neg = tp + fn, tn + fp
    ok = (pos > 0) & (neg > 0)
    excluded = tuple(int(i) for i in np.flatnonzero(~ok))
    if excluded:
        log.warning("mA: attributes %s have only one ground-truth class and are excluded", excluded)
    if ok.any():
        mA = float(np.mean(0.5 * (tp[ok] / pos[ok] + tn[ok] / neg[ok])))
    else:
        mA = 0.0

    inter = (pred & y).sum(axis=1)
    union = (pred | y).sum(axis=1)
    npred = pred.sum(axis=1)
    ntrue = y.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        acc = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
        prec = np.where(npred > 0, inter / np.maximum(npred, 1), np.where(ntrue == 0, 1.0, 0.0))
        rec = np.where(ntrue > 0, inter / np.maximum(ntrue, 1), 1.0)
    A, P, R = float(acc.mean()), float(prec.mean()), float(rec.mean())
    F1 = 2 * P * R / (P + R) if P + R > 0 else 0.0
    per_attr = [(int(a), int(b), int(c), int(d)) for a, b, c, d in zip(tp, fp, tn, fn)]
    return MetricReport(mA, A, P, R, F1, per_attr, excluded)
