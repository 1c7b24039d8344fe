"""Exception hierarchy.

Every error carries the process exit code the CLI should use: data problems
(bad files, manifests, atlases) exit with 3, numeric problems (shapes,
ranges, degenerate statistics) exit with 4.
"""


class ConnectoscopeError(Exception):
    exit_code = 1


class DataError(ConnectoscopeError):
    exit_code = 3


class NumericError(ConnectoscopeError):
    exit_code = 4


# nifti_io
class HeaderError(DataError):
    pass


class BadMagic(HeaderError):
    pass


class BadSize(HeaderError):
    pass


class UnsupportedDatatype(HeaderError):
    pass


class Truncated(DataError):
    pass


class IoError(DataError):
    pass


class RangeError(NumericError):
    pass


# volume_ops
class TrimTooLong(DataError):
    pass


# connectome
class EmptyRoi(DataError):
    pass


class EmptyRoiWarning(UserWarning):
    pass


class EmptyGroup(DataError):
    pass


# shared shape / numeric errors
class ShapeMismatch(NumericError):
    pass


class InputTooSmall(NumericError):
    pass


class BatchTooSmall(NumericError):
    pass


# classical_ml
class AllZero(NumericError):
    pass


class NoSplit(NumericError):
    pass


class SingleClass(NumericError):
    pass


class LengthMismatch(NumericError):
    pass


# pipeline
class DuplicateId(DataError):
    pass


class MissingFile(DataError):
    pass


class BadLabel(DataError):
    pass


class StratumTooSmall(DataError):
    pass
