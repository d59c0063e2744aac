# -*- coding: utf-8 -*-
"""
Exception hierarchy. Every error carries the process exit code the CLI
returns when it aborts a run: 2 config, 3 data, 4 numerical failure.
"""

from typing import Dict, List, Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ComoveError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


# ----------------------------------------------------------------------------
# Configuration
# ----------------------------------------------------------------------------

class ConfigError(ComoveError):
    """Invalid or incomplete configuration."""

    exit_code = EXIT_CONFIG


class SpecError(ConfigError):
    """Invalid MaskSpec or SyntheticSpec."""


class UnsupportedConstraintError(ConfigError):
    """Requested kernel variant is not a restriction of the source variant."""


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------

class DataError(ComoveError):
    """Problem with input data."""

    exit_code = EXIT_DATA


class DataParseError(DataError):
    """Malformed date or value in an input file."""

    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class DuplicateObservationError(DataError):
    """The same (channel, date) appears twice."""


class InsufficientDataError(DataError):
    """Too few observations for the requested operation."""


class TransformDomainError(DataError):
    """A value lies outside a transform's domain (e.g. log of y <= 0)."""


class UnknownChannelError(DataError):
    """A query names a channel that is not in the data set."""


class ChannelMismatchError(DataError):
    """Two inputs disagree on their channel lists."""


class NormalizationUndefinedError(DataError):
    """Normalized metric requested for ground truth with zero mean."""


class EmptyReportError(DataError):
    """No test points to evaluate."""


# ----------------------------------------------------------------------------
# Numerical
# ----------------------------------------------------------------------------

class NumericalError(ComoveError):
    """Numerical failure during inference or training."""

    exit_code = EXIT_NUMERICAL


class InvalidParameterError(NumericalError):
    """Kernel or parameter vector violates its invariants."""


class IllConditionedKernelError(NumericalError):
    """Cholesky factorization failed even at the largest jitter."""

    def __init__(self, message: str, jitter: float):
        super().__init__(f"{message} (final jitter {jitter:.3e})")
        self.jitter = jitter


class DegeneratePriorError(NumericalError):
    """Prior scale is zero because a channel is identically zero."""


class DegenerateChannelError(NumericalError):
    """A channel has non-positive variance under the kernel."""


class GradientCheckError(NumericalError):
    """Analytic gradient disagrees with finite differences."""

    def __init__(self, message: str, relative_error: float):
        super().__init__(message)
        self.relative_error = relative_error


class TrainingFailedError(NumericalError):
    """Every training trial failed."""

    def __init__(self, message: str, diagnostics: List[Dict]):
        super().__init__(message)
        self.diagnostics = diagnostics
