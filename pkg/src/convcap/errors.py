"""Error types shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and its
subclasses) -> 3, NumericError -> 4.
"""


class ConvCapError(Exception):
    pass


class ConfigError(ConvCapError):
    pass


class DataError(ConvCapError):
    pass


class FormatError(DataError):
    """Malformed or truncated file content (PPM, ICF1, CKPT, JSONL)."""


class NumericError(ConvCapError):
    """Non-finite values where finite ones are required (e.g. NaN loss)."""
