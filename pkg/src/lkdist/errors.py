"""Exception types raised across the package."""


class LkdistError(Exception):
    """Base class for all package errors."""


class ParseError(LkdistError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DimensionMismatch(LkdistError):
    pass


class EmptyDataset(LkdistError):
    pass


class KTooLarge(LkdistError):
    pass


class KOutOfRange(LkdistError):
    pass


class ShapeMismatch(LkdistError):
    pass


class NonFiniteInput(LkdistError):
    pass


class DegenerateWeights(LkdistError):
    pass


class NotFitted(LkdistError):
    pass


class FingerprintMismatch(LkdistError):
    pass


class CorruptArtifact(LkdistError):
    pass


class VersionUnsupported(LkdistError):
    pass


class InvalidSpec(LkdistError):
    pass
