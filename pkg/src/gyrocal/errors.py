"""Exception hierarchy shared across the toolkit.

CLI exit codes map onto these families: ConfigError -> 1, DataError -> 2,
NumericError -> 3.  Plain ValueError is reserved for programming-contract
violations (bad argument shapes, non-finite inputs) and is not remapped.
"""


class GyrocalError(Exception):
    """Base class for toolkit-specific failures."""


class ConfigError(GyrocalError):
    """Unusable configuration: unknown key, bad value, checkpoint/config mismatch."""


class DataError(GyrocalError):
    """Unusable input data."""


class ParseError(DataError):
    """Malformed record in an input file; message names file and line."""


class AlignmentError(DataError):
    """IMU and ground-truth streams cannot be aligned (empty overlap, gaps)."""


class NumericError(GyrocalError):
    """Non-finite value encountered where the pipeline cannot continue."""
