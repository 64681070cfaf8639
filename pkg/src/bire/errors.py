"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 2 (argparse),
``DataError`` exits 3, ``FitError`` and numeric failures exit 4.
"""

from __future__ import annotations


class BireError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(BireError, ValueError):
    """An argument or state violated a documented precondition."""


class DataError(BireError):
    """Malformed input data; carries file/line provenance when available."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        prefix = ""
        if path is not None:
            prefix = f"{path}:" if line is None else f"{path}:{line}: "
        super().__init__(prefix + message)


class ModelFormatError(DataError):
    """A model file failed validation; message names the offending section."""


class ModeNotStraddled(BireError):
    """Envelope initial points do not straddle the density mode.

    Retryable: the caller should widen the initial points.  ``slopes``
    holds the observed chord slopes for diagnostics.
    """

    def __init__(self, slopes):
        self.slopes = slopes
        super().__init__(f"initial points do not straddle the mode (chord slopes {slopes})")


class RejectionLimitError(BireError):
    """Rejection-sampling gave up; the target is probably not log-concave."""


class FitError(BireError):
    """A model fit failed; context identifies iteration/partition/stage."""


class DivergenceError(FitError):
    """An optimizer produced a non-finite parameter or loss."""
