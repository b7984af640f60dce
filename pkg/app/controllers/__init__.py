# Controllers package
from .base_controller import BaseController
from .evaluation_controller import EvaluationController
from .phantom_controller import PhantomController
from .pipeline_controller import PipelineController
from .registration_controller import RegistrationController
from .training_controller import TrainingController

__all__ = ['BaseController', 'PhantomController', 'RegistrationController', 'TrainingController',
           'EvaluationController', 'PipelineController']
