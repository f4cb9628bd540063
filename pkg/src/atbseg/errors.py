"""Exception hierarchy shared across the toolkit.

Exit codes (used by the CLI): 2 = configuration error, 3 = data error,
4 = training divergence.
"""


class AtbsegError(Exception):
    exit_code = 1


class ConfigError(AtbsegError):
    """Invalid configuration: bad config values, schema violations, impossible splits."""

    exit_code = 2


class DataError(AtbsegError):
    """Invalid or missing data: ingestion failures, dimension mismatches, bad annotations."""

    exit_code = 3


class DegenerateContourError(DataError):
    """Contour has too few vertices to enclose any area."""


class TrainingDivergence(AtbsegError):
    """Training produced a non-finite loss. Carries the last finite history."""

    exit_code = 4

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
