"""
Exception hierarchy shared by all components
"""


class MvoccError(Exception):
    """Base class for every error raised by the pipeline"""


# Geometry
class PointBehindCamera(MvoccError):
    pass


class DegenerateFrame(MvoccError):
    pass


class BadIndex(MvoccError):
    pass


# Scene generation / configuration
class ShapeSpecError(MvoccError):
    pass


class ConfigError(MvoccError):
    """Invalid experiment configuration; carries every violation found"""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class ConfigParseError(ConfigError):
    def __init__(self, message, line=None):
        super().__init__(f'line {line}: {message}' if line is not None else message)
        self.line = line


# Meshes / metrics
class EmptyMesh(MvoccError):
    pass


class EmptyTarget(MvoccError):
    pass


# Differentiable core
class NonScalarOutput(MvoccError):
    pass


class ShapeMismatch(MvoccError):
    pass


class MissingGrad(MvoccError):
    pass


# Model / training
class EmptyViewSet(MvoccError):
    pass


class InsufficientViews(MvoccError):
    pass


class InsufficientPoints(MvoccError):
    pass


class NonFiniteLoss(MvoccError):
    pass


class CheckpointIoError(MvoccError):
    pass


class VersionMismatch(MvoccError):
    pass


class NameMismatch(MvoccError):
    pass
