"""Exception types raised across the package."""


class SparseSplatError(Exception):
    """Base class for every error raised by this package."""


class DataError(SparseSplatError):
    """Bad or inconsistent input data (CLI exit code 2)."""


class NumericalError(SparseSplatError):
    """A numerical abort (CLI exit code 3)."""


class BehindCamera(DataError):
    pass


class NonPositiveDepth(DataError):
    pass


class DegeneratePlane(NumericalError):
    pass


class AllInvalid(DataError):
    pass


class ZeroQuaternion(NumericalError):
    pass


class LengthMismatch(DataError):
    pass


class EmptyCloud(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class ZeroVariance(NumericalError):
    pass


class NonFinite(NumericalError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class NonFiniteGradient(NonFinite):
    pass


class EmptyMesh(DataError):
    pass


class EmptyInput(DataError):
    pass


class FormatError(DataError):
    """Base for file-format errors; carries the offending byte offset."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MalformedHeader(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class UnsupportedVariant(FormatError):
    pass


class DegenerateNeighborhood(UserWarning):
    """Emitted when a point has fewer than 3 distinct neighbours during init."""
