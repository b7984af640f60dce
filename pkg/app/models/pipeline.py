from dataclasses import dataclass, field
from typing import Tuple

from app.errors import StageError
from app.models.base_model import BaseModel
from app.models.geometry import IcpConfig
from app.models.phantom import PhantomRanges
from app.models.training import TrainConfig


@dataclass(frozen=True)
class DatasetConfig(BaseModel):
    labeled: int = 90
    unlabeled: int = 60
    test: int = 30


@dataclass(frozen=True)
class PipelineConfig(BaseModel):
    """Effective configuration of one end-to-end run."""

    profile: str = 'desk'
    defaults_version: str = ''
    seed: int = 0
    output_dir: str = 'artifacts'
    data_dir: str = ''
    crop_size: Tuple[int, int] = (32, 32)
    phantom_dims: Tuple[int, int, int] = (32, 32, 32)
    phantom_spacing: Tuple[float, float, float] = (1.75, 1.75, 1.0)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    phantom: PhantomRanges = field(default_factory=PhantomRanges)
    icp: IcpConfig = field(default_factory=IcpConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if any(int(v) <= 0 for v in self.crop_size):
            raise StageError('config', f"crop size must be positive: {self.crop_size}")
        if self.seed < 0:
            raise StageError('config', "seed must be nonnegative")
