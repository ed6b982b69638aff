"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: DataError -> 3, NumericError -> 4.
"""


class DataError(Exception):
    """Malformed, inconsistent or out-of-contract input data."""


class NumericError(Exception):
    """Numerical failure: singular solve, non-finite values, degenerate stats."""
