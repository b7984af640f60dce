# Models package
from .base_model import BaseModel
from .geometry import IcpConfig, IcpResult, PointCloud, RegistrationResult, RigidTransform
from .phantom import Dataset, PhantomCase, PhantomParams, PhantomRanges, WeberLabel
from .pipeline import DatasetConfig, PipelineConfig
from .report import BinaryRates, ClassMetrics, ConfusionMatrix, MetricsReport, StructureScore
from .training import (ClassPrototype, ConfidenceBuffer, EpochLog, LabeledSet, TrainConfig,
                       TrainingHistory, UnlabeledSet)
from .volume import BBox, Mask, Volume

__all__ = ['BaseModel', 'Volume', 'Mask', 'BBox', 'PointCloud', 'RigidTransform', 'IcpConfig',
           'IcpResult', 'RegistrationResult', 'PhantomParams', 'PhantomRanges', 'PhantomCase',
           'Dataset', 'WeberLabel', 'TrainConfig', 'LabeledSet', 'UnlabeledSet', 'ClassPrototype',
           'ConfidenceBuffer', 'EpochLog', 'TrainingHistory', 'ConfusionMatrix', 'BinaryRates',
           'ClassMetrics', 'StructureScore', 'MetricsReport', 'DatasetConfig', 'PipelineConfig']
