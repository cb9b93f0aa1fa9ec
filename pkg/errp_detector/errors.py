"""Exception hierarchy shared by the pipeline and the command line."""


class ErrpError(Exception):
    """Base class for every error raised by the package."""


class FilterDesignError(ErrpError):
    pass


class DimensionError(ErrpError):
    pass


class SignalLengthError(ErrpError):
    pass


class DegenerateDataError(ErrpError):
    pass


class TrainingError(ErrpError):
    pass


class DegeneratePatternError(ErrpError):
    pass


class SimulationError(ErrpError):
    pass


class TrialConsistencyError(ErrpError):
    pass


class UndefinedMetricError(ErrpError):
    pass


class InsufficientTrialsError(ErrpError):
    pass


class ConfigError(ErrpError):
    pass


class ArchiveFormatError(ErrpError):
    pass


class ModelFormatError(ErrpError):
    pass


class UndefinedThresholdError(UndefinedMetricError):
    """The session holds no usable decision threshold for the evaluated blocks."""
