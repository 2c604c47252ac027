"""Exception hierarchy shared across the package."""


class QpdynError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(QpdynError):
    """Configuration file is malformed, incomplete, or has unknown keys."""


class DataFormatError(QpdynError):
    """A dataset file does not match the documented schema."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f" [{path}" + (f":{line}" if line is not None else "") + "]"
        super().__init__(message + where)


class InfeasibleDecompositionError(QpdynError, ValueError):
    """T2* exceeds 2*T1 beyond tolerance, so no dephasing time exists."""


class NonThermalStateError(QpdynError, ValueError):
    """Excited-state population >= 1/2 has no finite Boltzmann temperature."""


class RankDeficiencyError(QpdynError):
    """Normal matrix is singular; the fit parameters are not identifiable."""


class InitializationError(QpdynError):
    """No usable starting point could be derived from the data."""


class DegenerateDesignError(QpdynError):
    """Regressor values carry no information (e.g. all x identical)."""


class InsufficientDataError(QpdynError):
    """Fewer qualifying datasets/points than the operation requires."""


class DatasetRejectedError(QpdynError):
    """No admissible monotone suffix exists for a fitted rate series."""


class SweepInvalidError(QpdynError):
    """Too many excluded refits for the parameter sweep to be meaningful."""


class FeatureExtractionError(QpdynError):
    """Scene features could not be identified in a transmission image."""
