"""
Exception types raised by the dpnb services.

The command-line layer maps these onto exit codes: configuration problems
exit with 2, everything raised while computing exits with 1.
"""

from typing import Optional


class DpnbError(Exception):
    """Base class for all dpnb errors."""


class DatasetError(DpnbError):
    """Malformed input files, invalid indices or unusable datasets."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigurationError(DpnbError):
    """Invalid hyper-parameters or command-line combinations."""


class TrainingError(DpnbError):
    """Training produced a non-finite or divergent similarity matrix."""

    def __init__(self, message: str, iteration: Optional[int] = None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


class EvaluationError(DpnbError):
    """Scoring failed, e.g. an empty test fold."""
