"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError -> 2, NumericError -> 3.
Argument/usage problems raise ValueError (or click's usage errors) -> 1.
"""


class CipherbreakError(Exception):
    """Base class for errors raised by this package."""


class DataError(CipherbreakError):
    """Bad or inconsistent input data (files, shapes, manifests)."""


class NumericError(CipherbreakError):
    """Numeric failure such as a NaN loss during training."""
