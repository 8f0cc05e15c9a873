"""Exception hierarchy shared by all ptlane modules."""


class PtlaneError(Exception):
    """Base class for library errors."""


class GeometryError(PtlaneError, ValueError):
    pass


class DegenerateHorizon(GeometryError):
    pass


class AmbiguousAxis(GeometryError):
    pass


class InvalidStepCount(GeometryError):
    pass


class SingularHomography(GeometryError):
    pass


class KeyPointBehindCamera(GeometryError):
    pass


class EmptyBoundingBox(GeometryError):
    pass


class ShapeMismatch(PtlaneError, ValueError):
    pass


class EmptyLabelSet(PtlaneError, ValueError):
    pass


class NoInstances(PtlaneError, ValueError):
    pass


class IncompatibleChain(PtlaneError, ValueError):
    pass


class DegenerateGeometry(PtlaneError, ValueError):
    pass


class MalformedRecord(PtlaneError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class LengthMismatch(MalformedRecord):
    pass


class RowMismatch(PtlaneError, ValueError):
    pass


class MissingGeometry(PtlaneError, ValueError):
    pass


class ConfigError(PtlaneError, ValueError):
    """Bad or missing configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointError(PtlaneError, ValueError):
    pass
