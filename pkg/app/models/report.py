from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.models.base_model import BaseModel


@dataclass(frozen=True, eq=False)
class ConfusionMatrix(BaseModel):
    """K x K counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    @property
    def num_classes(self):
        return int(self.counts.shape[0])

    @property
    def total(self):
        return int(self.counts.sum())

    def row_normalized(self):
        sums = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, sums, out=np.zeros(self.counts.shape), where=sums > 0)

    def one_vs_rest(self, k):
        """Return (tp, tn, fp, fn) treating class k as positive."""
        tp = int(self.counts[k, k])
        fn = int(self.counts[k, :].sum()) - tp
        fp = int(self.counts[:, k].sum()) - tp
        tn = self.total - tp - fn - fp
        return tp, tn, fp, fn


@dataclass(frozen=True)
class BinaryRates(BaseModel):
    """Accuracy, precision, specificity, sensitivity; None marks an undefined ratio."""

    accuracy: Optional[float]
    precision: Optional[float]
    specificity: Optional[float]
    sensitivity: Optional[float]


@dataclass(frozen=True)
class ClassMetrics(BaseModel):
    name: str
    support: int
    accuracy: Optional[float]
    precision: Optional[float]
    specificity: Optional[float]
    sensitivity: Optional[float]
    auroc: Optional[float]


@dataclass(frozen=True)
class StructureScore(BaseModel):
    """Overlap and surface distance of one anatomical structure."""

    name: str
    dice: float
    hd95: Optional[float]
    both_empty: bool = False


@dataclass(frozen=True, eq=False)
class MetricsReport(BaseModel):
    classes: List[ClassMetrics]
    macro: ClassMetrics
    overall_accuracy: float
    confusion: ConfusionMatrix
    structures: List[StructureScore] = field(default_factory=list)
