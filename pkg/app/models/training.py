from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.errors import TrainingError
from app.models.base_model import BaseModel

WEIGHTING_MODES = ('logit', 'loss')
TRAINING_MODES = ('semi', 'supervised')


@dataclass(frozen=True)
class TrainConfig(BaseModel):
    """Optimiser and semi-supervised training settings."""

    learning_rate: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 500
    mmd_weight: float = 15.0
    confidence_threshold: float = 0.5
    buffer_capacity: int = 256
    mmd_bandwidth: Optional[float] = None
    weighting: str = 'logit'
    mode: str = 'semi'
    augment: bool = True
    rwn_width: int = 64
    se_reduction: int = 4
    labeled_fraction: float = 0.2
    validation_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0 or self.momentum < 0:
            raise TrainingError("learning rate must be positive and momentum nonnegative")
        if self.batch_size < 2:
            raise TrainingError("batch size must be at least 2 for batch normalisation")
        if self.epochs < 0:
            raise TrainingError("epochs must be nonnegative")
        if self.mmd_weight < 0:
            raise TrainingError("lambda must be nonnegative")
        if not 0.0 < self.confidence_threshold < 1.0:
            raise TrainingError("confidence threshold must lie in (0, 1)")
        if self.buffer_capacity < 1:
            raise TrainingError("buffer capacity must be positive")
        if self.weighting not in WEIGHTING_MODES:
            raise TrainingError(f"weighting must be one of {WEIGHTING_MODES}")
        if self.mode not in TRAINING_MODES:
            raise TrainingError(f"mode must be one of {TRAINING_MODES}")
        if not 0.0 < self.labeled_fraction <= 1.0 or not 0.0 <= self.validation_fraction < 1.0:
            raise TrainingError("labeled fraction must lie in (0, 1] and validation in [0, 1)")


@dataclass(frozen=True, eq=False)
class LabeledSet(BaseModel):
    """2D crops with Weber class indices."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim != 3 or images.shape[0] != labels.shape[0]:
            raise TrainingError(f"labeled set needs (N, H, W) images matching labels, got {images.shape}")
        object.__setattr__(self, 'images', images)
        object.__setattr__(self, 'labels', labels)

    def __len__(self):
        return int(self.labels.shape[0])

    def covers(self, num_classes):
        return set(np.unique(self.labels).tolist()) >= set(range(num_classes))

    def subset(self, indices):
        return LabeledSet(self.images[indices], self.labels[indices])


@dataclass(frozen=True, eq=False)
class UnlabeledSet(BaseModel):
    """2D crops; hidden labels exist only for oracle measurements."""

    images: np.ndarray
    hidden_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.size == 0:
            images = images.reshape(0, *(images.shape[1:] if images.ndim == 3 else (0, 0)))
        if images.ndim != 3:
            raise TrainingError(f"unlabeled set needs (N, H, W) images, got {images.shape}")
        object.__setattr__(self, 'images', images)
        if self.hidden_labels is not None:
            object.__setattr__(self, 'hidden_labels', np.asarray(self.hidden_labels, dtype=np.int64).reshape(-1))

    def __len__(self):
        return int(self.images.shape[0])


@dataclass(frozen=True, eq=False)
class ClassPrototype(BaseModel):
    """Mean labeled feature map of one class."""

    class_id: int
    feature_map: np.ndarray


class ConfidenceBuffer:
    """FIFO store of feature vectors from recently selected confident samples."""

    def __init__(self, capacity):
        if capacity < 1:
            raise TrainingError("buffer capacity must be positive")
        self.capacity = int(capacity)
        self._entries = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._entries)

    def push(self, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape[0] == 0:
            return
        for vector in vectors.reshape(vectors.shape[0], -1):
            self._entries.append(vector.copy())

    @property
    def entries(self):
        if not self._entries:
            return np.zeros((0, 0))
        return np.stack(list(self._entries))

    def clear(self):
        self._entries.clear()


@dataclass
class EpochLog(BaseModel):
    """Per-epoch training record."""

    epoch: int
    loss_l: float = 0.0
    loss_u: float = 0.0
    loss_mmd: float = 0.0
    loss_total: float = 0.0
    n_selected: int = 0
    pseudo_label_accuracy: Optional[float] = None
    val_accuracy: Optional[float] = None
    loss_rwn: float = 0.0


@dataclass
class TrainingHistory(BaseModel):
    """All epoch logs plus the epoch whose parameters were kept."""

    epochs: List[EpochLog] = field(default_factory=list)
    best_epoch: Optional[int] = None
