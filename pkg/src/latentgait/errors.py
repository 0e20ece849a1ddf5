"""Exception taxonomy shared across the package."""


class LatentGaitError(Exception):
    """Base class for all package errors."""


class ShapeError(LatentGaitError, ValueError):
    """Array dimensions do not match what an operation requires."""


class NumericError(LatentGaitError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DynamicsError(LatentGaitError, RuntimeError):
    """Constrained dynamics / impact solve failed (singular or inconsistent)."""


class ControlError(LatentGaitError, RuntimeError):
    """Task-space controller could not produce torques; episode-level failure."""


class StateError(LatentGaitError, RuntimeError):
    """Stateful machinery used before it was initialized."""


class RangeError(LatentGaitError, ValueError):
    """Scalar argument outside its documented range."""


class DataError(LatentGaitError, ValueError):
    """Dataset contents unusable (empty, degenerate, inconsistent)."""


class FormatError(LatentGaitError, ValueError):
    """Serialized container malformed: bad magic, version, or truncation."""


class TrainingError(LatentGaitError, RuntimeError):
    """Optimization diverged or produced non-finite losses."""


class ConfigError(LatentGaitError, ValueError):
    """Experiment configuration failed to parse or validate."""


class CompatibilityError(LatentGaitError, ValueError):
    """Artifacts from different pipeline runs were mixed (hash mismatch)."""


class CollectionError(LatentGaitError, RuntimeError):
    """Too many grid gaits failed during dataset collection."""
