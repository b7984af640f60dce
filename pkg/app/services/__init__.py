# Services package
from .base_service import BaseService
from .metrics_service import MetricsService
from .phantom_service import PhantomService
from .pipeline_service import PipelineService
from .registration_service import RegistrationService
from .ssl_service import SemiSupervisedTrainer
from .volume_service import VolumeService

__all__ = ['BaseService', 'VolumeService', 'PhantomService', 'RegistrationService', 'MetricsService',
           'SemiSupervisedTrainer', 'PipelineService']
