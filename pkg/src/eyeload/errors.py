"""Exception types raised across the package."""


class EyeloadError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(EyeloadError, ValueError):
    pass


class NoForwardState(EyeloadError, RuntimeError):
    pass


class EmptyRoI(EyeloadError, ValueError):
    pass


class OffsetOutOfRange(EyeloadError, ValueError):
    pass


class OutOfCrop(EyeloadError, ValueError):
    pass


class OutOfExtent(EyeloadError, ValueError):
    pass


class ConfigInvalid(EyeloadError, ValueError):
    pass


class JoinMismatch(EyeloadError, ValueError):
    pass


class SchemaError(EyeloadError, ValueError):
    pass


class MissingLandmark(EyeloadError, ValueError):
    pass


class SequenceTooShort(EyeloadError, ValueError):
    pass


class GeometryOutOfBounds(EyeloadError, ValueError):
    pass


class IncompatibleCheckpoint(EyeloadError, ValueError):
    pass


class EmptyInput(EyeloadError, ValueError):
    pass
