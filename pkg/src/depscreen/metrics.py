"""Confusion matrix and the four reported metrics (Depressed = positive)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .errors import Empty, LengthMismatch

POSITIVE = 1


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def as_grid(self) -> list[list[int]]:
        """Rows = actual (Depressed, Non-depressed), columns = predicted."""
        return [[self.tp, self.fn], [self.fp, self.tn]]


@dataclass(frozen=True)
class MetricReport:
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float


def confusion(predictions, truths) -> ConfusionMatrix:
    predictions, truths = list(predictions), list(truths)
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} labels")
    if not predictions:
        raise Empty("no samples to evaluate")
    tp = fp = fn = tn = 0
    for p, t in zip(predictions, truths):
        pp, tt = int(p) == POSITIVE, int(t) == POSITIVE
        if pp and tt:
            tp += 1
        elif pp:
            fp += 1
        elif tt:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn)


def report(cm: ConfusionMatrix) -> MetricReport:
    if cm.total <= 0:
        raise Empty("confusion matrix is empty")
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else None
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else None
    if precision and recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    return MetricReport(accuracy, precision, recall, f1)


def _fmt(v: float | None) -> str:
    return "-" if v is None else f"{v:.4f}"


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Aligned text: accuracy as whole percent, the rest to four decimals."""
    header = ("Model", "Accuracy", "F1 Score", "Precision", "Recall")
    body = [
        (name, f"{round(r.accuracy * 100):d}%", _fmt(r.f1), _fmt(r.precision), _fmt(r.recall))
        for name, r in rows
    ]
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in [header, *body]]
    return "\n".join(lines)


def format_confusion(cm: ConfusionMatrix) -> str:
    return (
        "                 pred Depressed  pred Non-depressed\n"
        f"Depressed        {cm.tp:>14d}  {cm.fn:>18d}\n"
        f"Non-depressed    {cm.fp:>14d}  {cm.tn:>18d}"
    )


def to_json_line(name: str, cm: ConfusionMatrix, rep: MetricReport) -> str:
    payload = {"name": name, "confusion": asdict(cm), **asdict(rep)}
    return json.dumps(payload, sort_keys=True)
