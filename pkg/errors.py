# errors.py
from typing import Optional


class CsdError(Exception):
    """Base class for every failure raised by the pipeline."""


# -----------------------------
# Parameter / geometry errors
# -----------------------------
class InvalidParameter(CsdError, ValueError):
    pass


class UnnormalizedRotation(CsdError, ValueError):
    pass


class SingularCovariance(CsdError, ValueError):
    pass


class ShapeError(CsdError, ValueError):
    pass


class CulledBehindCamera(CsdError):
    """Not a failure: the caller skips the Gaussian."""


class InvalidCondition(CsdError, ValueError):
    pass


class InvalidDistribution(CsdError, ValueError):
    pass


# -----------------------------
# Persistence
# -----------------------------
class IoError(CsdError, OSError):
    pass


class FormatError(CsdError, ValueError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


# -----------------------------
# Optimization
# -----------------------------
class RejectedStep(CsdError):
    pass


class OptimizationAborted(CsdError):
    pass


class GenerationMismatch(CsdError):
    pass


# -----------------------------
# Mesh extraction
# -----------------------------
class EmptyCloud(CsdError, ValueError):
    pass


class DegenerateField(CsdError, ValueError):
    pass


class InvalidField(CsdError, ValueError):
    pass


class DivergedFit(CsdError):
    pass


# -----------------------------
# Configuration
# -----------------------------
class ConfigError(CsdError, ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")
