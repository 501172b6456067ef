"""Class-balanced evaluation and the collapse diagnostic."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

COLLAPSE_MAJ_PRED = 0.95
COLLAPSE_MARGIN = 0.05

CSV_FIELDS = ("macro_f1", "bal_acc", "maj_pred", "overall_acc", "collapse_flag")


@dataclass(frozen=True)
class EvalReport:
    macro_f1: float
    bal_acc: float
    maj_pred: float
    overall_acc: float
    precision: tuple[float, ...]
    recall: tuple[float, ...]
    f1: tuple[float, ...]
    confusion: tuple[tuple[int, ...], ...]  # rows: true class, columns: predicted class
    collapse_flag: bool

    @property
    def K(self) -> int:
        return len(self.recall)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def csv_header(self, prefix: str = "") -> str:
        return ",".join(prefix + f for f in CSV_FIELDS)

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, f):.6f}" if f != "collapse_flag" else str(int(self.collapse_flag))
                        for f in CSV_FIELDS)


def _safe_div(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def evaluate(preds, labels, K: int, margin: float = COLLAPSE_MARGIN) -> EvalReport:
    """Macro-F1, balanced accuracy, Maj-Pred and the collapse flag.

    Every one of the ``K`` classes enters the macro averages; 0/0 counts as 0.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise ValueError("preds and labels must be 1-D and equally long")
    if preds.size == 0:
        raise ValueError("nothing to evaluate")
    if preds.min() < 0 or labels.min() < 0 or preds.max() >= K or labels.max() >= K:
        raise ValueError(f"class index outside 0..{K - 1}")

    cm = np.zeros((K, K), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    tp = np.diag(cm)
    recall = _safe_div(tp, cm.sum(axis=1))
    precision = _safe_div(tp, cm.sum(axis=0))
    f1 = _safe_div(2 * precision * recall, precision + recall)
    n = preds.size
    bal_acc = float(recall.mean())
    maj_pred = float(cm.sum(axis=0).max() / n)
    return EvalReport(
        macro_f1=float(f1.mean()),
        bal_acc=bal_acc,
        maj_pred=maj_pred,
        overall_acc=float(tp.sum() / n),
        precision=tuple(float(v) for v in precision),
        recall=tuple(float(v) for v in recall),
        f1=tuple(float(v) for v in f1),
        confusion=tuple(tuple(int(v) for v in row) for row in cm),
        collapse_flag=bool(maj_pred >= COLLAPSE_MAJ_PRED and bal_acc <= 1.0 / K + margin),
    )


def argmax_pred(probs) -> int:
    """Index of the largest probability; ties go to the lowest index."""
    return int(np.argmax(np.asarray(probs)))
