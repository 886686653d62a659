"""Confusion matrices and the metrics derived from them."""
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from sklearn.metrics import confusion_matrix

from roadscope.core.exceptions import EmptyMatrix, LabelOutOfRange
from roadscope.ingest.models import ROAD_CLASSES

N_CLASSES = len(ROAD_CLASSES)


class ConfusionMatrix(BaseModel):
    """3 x 3 counts; rows are true classes, columns predicted classes."""

    model_config = ConfigDict(frozen=True)

    counts: List[List[int]] = Field(default_factory=lambda: [[0] * N_CLASSES for _ in range(N_CLASSES)])

    @field_validator("counts")
    @classmethod
    def check_counts(cls, v: List[List[int]]) -> List[List[int]]:
        if len(v) != N_CLASSES or any(len(row) != N_CLASSES for row in v):
            raise ValueError(f"confusion matrix must be {N_CLASSES}x{N_CLASSES}")
        if any(c < 0 for row in v for c in row):
            raise ValueError("counts must be non-negative")
        return v

    @classmethod
    def from_pairs(cls, true: Sequence[int], predicted: Sequence[int]) -> "ConfusionMatrix":
        for label in list(true) + list(predicted):
            if not 0 <= int(label) < N_CLASSES:
                raise LabelOutOfRange(int(label), N_CLASSES)
        if len(true) == 0:
            return cls()
        cm = confusion_matrix(list(true), list(predicted), labels=list(range(N_CLASSES)))
        return cls(counts=cm.astype(int).tolist())

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    @property
    def total(self) -> int:
        return int(self.array.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(counts=(self.array + other.array).tolist())


class ClassMetrics(BaseModel):
    precision: float
    recall: float
    f1: float


class MetricsRow(BaseModel):
    scenario: str
    n: int
    accuracy: float
    macro_f1: float
    per_class: Dict[str, ClassMetrics]
    confusion: ConfusionMatrix

    def flat(self) -> Dict[str, object]:
        """Report columns in their stable order."""
        row: Dict[str, object] = {
            "scenario": self.scenario,
            "n": self.n,
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
        }
        for name, m in self.per_class.items():
            row[f"{name}_precision"] = m.precision
            row[f"{name}_recall"] = m.recall
            row[f"{name}_f1"] = m.f1
        return row


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def compute_metrics(cm: ConfusionMatrix, scenario: str = "") -> MetricsRow:
    """Accuracy, per-class precision/recall/F1 and macro F1; 0/0 is 0."""
    counts = cm.array
    total = int(counts.sum())
    if total == 0:
        raise EmptyMatrix()

    per_class: Dict[str, ClassMetrics] = {}
    for i, road_class in enumerate(ROAD_CLASSES):
        tp = counts[i, i]
        precision = _ratio(tp, counts[:, i].sum())
        recall = _ratio(tp, counts[i, :].sum())
        per_class[road_class.value] = ClassMetrics(
            precision=precision,
            recall=recall,
            f1=_ratio(2 * precision * recall, precision + recall),
        )

    return MetricsRow(
        scenario=scenario,
        n=total,
        accuracy=_ratio(np.trace(counts), total),
        macro_f1=float(np.mean([m.f1 for m in per_class.values()])),
        per_class=per_class,
        confusion=cm,
    )
