"""Exception hierarchy shared across the package."""


class SciqaError(Exception):
    """Base class for all package errors."""


class ConfigError(SciqaError, ValueError):
    pass


class ManifestParseError(SciqaError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(SciqaError, ValueError):
    pass


class DegenerateRangeError(SciqaError, ValueError):
    pass


class SizeError(SciqaError, ValueError):
    pass


class SamplingError(SciqaError, ValueError):
    pass


class SampleSizeError(SciqaError, ValueError):
    pass


class NumericError(SciqaError, FloatingPointError):
    pass


class UndefinedMetricError(SciqaError, ValueError):
    pass


class CheckpointError(SciqaError, IOError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
