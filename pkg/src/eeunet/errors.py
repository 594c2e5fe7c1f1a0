"""Exception hierarchy. Each top-level class carries the CLI exit code."""


class EEUNetError(Exception):
    exit_code = 1


class UsageError(EEUNetError):
    exit_code = 2


class DataError(EEUNetError, ValueError):
    exit_code = 3


class DivergenceDetected(EEUNetError, RuntimeError):
    exit_code = 4

    def __init__(self, message, batch_id=None):
        super().__init__(message)
        self.batch_id = batch_id


class IoFailure(EEUNetError, OSError):
    exit_code = 5


# nifti_io
class BadMagic(DataError):
    pass


class PairedFormatUnsupported(BadMagic):
    pass


class UnsupportedDtype(DataError):
    pass


class TruncatedData(DataError):
    pass


class NonPositiveSpacing(DataError):
    pass


class NonFiniteData(DataError):
    pass


# dataset
class DimMismatch(DataError):
    pass


class UnknownLabel(DataError):
    pass


class TooFewPatients(DataError):
    pass


class EmptyFold(DataError):
    pass


# diffops / model / metrics
class ShapeMismatch(EEUNetError, ValueError):
    pass


class OddSpatialDim(ShapeMismatch):
    pass


class NonFiniteActivation(EEUNetError, FloatingPointError):
    pass


class EmptyGradient(EEUNetError, RuntimeError):
    pass


class EmptyRecords(DataError):
    pass


# edge
class BadKernel(EEUNetError, ValueError):
    pass


class GridTooSmall(EEUNetError, ValueError):
    pass
