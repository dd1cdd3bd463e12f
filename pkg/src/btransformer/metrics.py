"""Per-class precision / recall / F1 and their macro average."""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .errors import ShapeError


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def from_predictions(cls, pred, gold) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        gold = np.asarray(gold).astype(bool)
        if pred.shape != gold.shape or pred.ndim != 2:
            raise ShapeError(f"pred {pred.shape} and gold {gold.shape} must be equal N x C matrices")
        return cls(
            tp=(pred & gold).sum(axis=0),
            fp=(pred & ~gold).sum(axis=0),
            fn=(~pred & gold).sum(axis=0),
            tn=(~pred & ~gold).sum(axis=0),
        )

    @property
    def num_classes(self) -> int:
        return len(self.tp)


@dataclass
class ClassReport:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    macro_f1: float
    counts: ConfusionCounts

    def to_text(self) -> str:
        lines = [f"{'class':>7} {'precision':>10} {'recall':>10} {'f1':>10} {'support':>8}"]
        for c in range(len(self.f1)):
            lines.append(
                f"{c:>7} {self.precision[c]:>10.4f} {self.recall[c]:>10.4f} "
                f"{self.f1[c]:>10.4f} {int(self.support[c]):>8}"
            )
        lines.append(
            f"{'macro':>7} {self.precision.mean():>10.4f} {self.recall.mean():>10.4f} "
            f"{self.macro_f1:>10.4f} {int(self.support.sum()):>8}"
        )
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("class,precision,recall,f1,support\n")
        for c in range(len(self.f1)):
            buf.write(f"{c},{self.precision[c]!r},{self.recall[c]!r},{self.f1[c]!r},{int(self.support[c])}\n")
        buf.write(
            f"macro,{float(self.precision.mean())!r},{float(self.recall.mean())!r},"
            f"{self.macro_f1!r},{int(self.support.sum())}\n"
        )
        return buf.getvalue()


def _safe_ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    out = np.zeros(len(num), dtype=np.float64)
    nz = den > 0
    out[nz] = num[nz] / den[nz]
    return out


def macro_f1(pred, gold) -> Tuple[float, ClassReport]:
    """Unweighted mean of per-class F1 over all C classes.

    Zero denominators score 0: no predictions gives precision 0, no gold
    positives gives recall 0, and P + R = 0 gives F1 0, so a class absent from
    both pred and gold contributes 0.
    """
    counts = ConfusionCounts.from_predictions(pred, gold)
    precision = _safe_ratio(counts.tp, counts.tp + counts.fp)
    recall = _safe_ratio(counts.tp, counts.tp + counts.fn)
    f1 = _safe_ratio(2 * precision * recall, precision + recall)
    macro = float(f1.mean())
    report = ClassReport(precision, recall, f1, counts.tp + counts.fn, macro, counts)
    return macro, report
