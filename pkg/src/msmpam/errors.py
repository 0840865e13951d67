"""Exception hierarchy.

Errors are grouped by the CLI exit code they map to: ``DataError`` subclasses
exit with 3, ``NumericError`` subclasses with 4.
"""

from __future__ import annotations


class MsmPamError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DataError(MsmPamError, ValueError):
    exit_code = 3


class NumericError(MsmPamError, ArithmeticError):
    exit_code = 4


# event-data
class ValidationError(DataError):
    """Raised when records fail validation; ``diagnostics`` lists each reject."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class NonPositiveDuration(ValidationError):
    pass


class IllegalTransition(ValidationError):
    pass


class BrokenHistory(ValidationError):
    pass


class SchemaMismatch(ValidationError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingColumn(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "missing column"


class EmptyDataset(DataError):
    pass


class UnknownState(DataError):
    pass


# ped-transform
class NonMonotoneExplicitCuts(DataError):
    pass


class CutsDoNotCover(DataError):
    pass


# spline-basis
class XOutsideKnots(DataError):
    pass


class OrderTooLarge(DataError):
    pass


class MissingNoneLevel(DataError):
    pass


# pam-fit
class RankDeficiency(NumericError):
    pass


class Divergence(NumericError):
    pass


class NonFiniteLinearPredictor(NumericError):
    pass


class CriterionNonFinite(NumericError):
    pass


class TermNotFound(DataError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "term not found"


# predict
class ExtrapolationBeyondKnots(UserWarning):
    """Warning: covariate values outside the training knots were clamped."""


class StepTooCoarse(NumericError):
    pass


# sim-engine
class UnknownTransition(DataError):
    pass


class DegenerateSchedule(DataError):
    pass


# baseline-models
class NonConvergence(NumericError):
    pass


class ZeroLengthInterval(DataError):
    pass


# eval-harness
class GridMismatch(DataError):
    pass


class DegenerateVariance(NumericError):
    pass


# weighting
class Separation(NumericError):
    pass


class ExtremePropensity(UserWarning):
    """Warning: some propensities fell below the reporting threshold."""
