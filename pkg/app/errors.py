class WeberlineError(Exception):
    """Base class for pipeline errors."""


class VolumeFormatError(WeberlineError, ValueError):
    """Raised when an RVOL file or header is malformed."""


class GeometryError(WeberlineError, ValueError):
    """Raised for invalid grids, boxes or resampling targets."""


class RegistrationError(WeberlineError, ValueError):
    """Raised when point-cloud registration cannot proceed."""


class TensorError(WeberlineError, ValueError):
    """Raised on shape or contract violations in tensornet."""


class NonFiniteError(TensorError):
    """Raised when an operation produces NaN or Inf."""


class TrainingError(WeberlineError, ValueError):
    """Raised for invalid training inputs."""


class MetricError(WeberlineError, ValueError):
    """Raised for invalid metric inputs."""


class StageError(WeberlineError):
    """Pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage, message):
        super().__init__(message)
        self.stage = stage
        self.message = message

    def __str__(self):
        return f"[{self.stage}] {self.message}"
