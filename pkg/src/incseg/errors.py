"""Exception hierarchy. CLI exit codes hang off the three top-level classes."""


class IncSegError(Exception):
    exit_code = 1


class ConfigError(IncSegError, ValueError):
    exit_code = 2


class DataError(IncSegError):
    exit_code = 3


class NumericalError(IncSegError, FloatingPointError):
    exit_code = 4


class InvalidInputError(ConfigError):
    """Tensor of the wrong shape, channel count or with non-finite entries."""


class InvalidLabelError(InvalidInputError):
    """A ground-truth label outside the classes the current stage may annotate."""


class NoPreviousStageError(ConfigError):
    pass


class VolumeFormatError(DataError):
    pass


class VolumeVersionError(DataError):
    pass


class TruncatedVolumeError(DataError):
    pass


class CheckpointError(DataError):
    pass
