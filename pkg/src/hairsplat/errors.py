"""Exception types shared across the package."""


class HairsplatError(Exception):
    """Base class for all package errors."""


class ShapeError(HairsplatError, ValueError):
    """Array dimensions or counts do not agree."""


class InvalidInputError(HairsplatError, ValueError):
    """Input values are outside the accepted domain (non-finite, out of range)."""


class DegenerateInputError(HairsplatError, ValueError):
    """Input is well-formed but leaves the quantity undefined (empty mask, zero weight)."""


class UnderdeterminedError(HairsplatError, ValueError):
    """Not enough samples to estimate the requested model."""


class StateError(HairsplatError, RuntimeError):
    """An operation was called on an object missing required state."""


class DivergenceError(HairsplatError, RuntimeError):
    """An optimization produced a non-finite loss."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
