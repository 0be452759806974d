"""Exception hierarchy shared by every vulqa module."""


class VulQAError(Exception):
    """Base class for all package errors."""


class DimensionError(VulQAError, ValueError):
    pass


class InputError(VulQAError, ValueError):
    pass


class DegenerateBatchError(VulQAError, ValueError):
    """Raised when a loss would be averaged over zero positions."""


class OptimizerError(VulQAError, RuntimeError):
    pass


class TokenizerTrainingError(VulQAError, ValueError):
    pass


class DecodeError(VulQAError, ValueError):
    pass


class ConfigError(VulQAError, ValueError):
    pass


class ContextOverflowError(VulQAError, ValueError):
    pass


class RenderError(VulQAError, RuntimeError):
    pass


class ValidationError(VulQAError, ValueError):
    pass


class ParseError(VulQAError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class StatsError(VulQAError, ValueError):
    pass


class GenerationFailure(VulQAError, RuntimeError):
    pass


class CheckpointError(VulQAError, IOError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class MissingCheckpointError(CheckpointError):
    pass
