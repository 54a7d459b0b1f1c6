"""Exception hierarchy shared across the toolkit.

The CLI maps these onto distinct exit codes: configuration problems,
data problems, and numerical convergence problems are kept separate so
batch drivers can react differently to each.
"""


class MetaImpactError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(MetaImpactError):
    """Invalid configuration or unusable parameter combination."""


class DataError(MetaImpactError):
    """Input data is missing, malformed, or empty after filtering."""


class DegenerateExecutionError(DataError):
    """Metaorder executed over a zero market-volume interval."""


class ParticipationOverflowError(DataError):
    """Metaorder volume exceeds the market volume of its own window."""


class RankDeficiencyError(DataError):
    """Least-squares design matrix is rank deficient."""

    def __init__(self, message: str, columns: tuple[int, ...] = ()):
        super().__init__(message)
        self.columns = columns


class ConvergenceError(MetaImpactError):
    """Iterative fit failed in a way the caller cannot recover from."""
