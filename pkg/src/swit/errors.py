"""Exception hierarchy shared by all modules.

Each class carries a short ``kind`` slug and an exit code; the CLI uses both
to emit its one-line machine-readable error.
"""


class SwitError(Exception):
    kind = "error"
    exit_code = 1


class InvalidArgument(SwitError, ValueError):
    kind = "invalid_argument"
    exit_code = 2


class DegenerateGeometry(InvalidArgument):
    kind = "degenerate_geometry"


class ShapeMismatch(InvalidArgument):
    kind = "shape_mismatch"
    exit_code = 5


class NumericError(SwitError, ArithmeticError):
    """A non-finite value appeared where the contract requires finite ones."""

    kind = "numeric_error"
    exit_code = 6


class ConfigError(SwitError, ValueError):
    kind = "parse_error"
    exit_code = 4


class DatasetError(SwitError):
    kind = "dataset_error"
    exit_code = 4


class DatasetFormatError(DatasetError):
    kind = "bad_magic"


class DatasetHeaderError(DatasetError):
    kind = "malformed_header"


class DatasetVersionError(DatasetError):
    kind = "version_mismatch"


class DatasetTruncatedError(DatasetError):
    kind = "truncated"


class CheckpointError(SwitError):
    kind = "checkpoint_error"
    exit_code = 4
