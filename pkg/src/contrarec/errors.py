"""Shared exception types.

Exit-code mapping for the CLI lives in cli.py; library code only raises.
"""


class ContrarecError(Exception):
    """Base class for all package errors."""


class ShapeError(ContrarecError, ValueError):
    """An operation received tensors whose shapes do not conform."""


class ContractError(ContrarecError, ValueError):
    """A documented precondition was violated by the caller."""


class DataError(ContrarecError, ValueError):
    """Malformed or unusable input data (parse failures, bad formats)."""


class EmptyDatasetError(DataError):
    """Filtering or loading produced no usable sessions."""


class DivergenceError(ContrarecError, RuntimeError):
    """Training hit a non-finite loss; carries the last finite parameters."""

    def __init__(self, message, params=None):
        super().__init__(message)
        self.params = params
