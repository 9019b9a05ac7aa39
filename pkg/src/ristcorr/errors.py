class InvalidArgument(ValueError):
    """Input violates an operation's precondition (shapes, ranges, dimensions)."""


class NumericalFailure(RuntimeError):
    """A non-finite value appeared; ``stage`` names where."""

    def __init__(self, stage: str, message: str = ""):
        self.stage = stage
        super().__init__(f"non-finite values in {stage}" + (f": {message}" if message else ""))


class DataError(RuntimeError):
    """Missing or malformed dataset files."""


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or truncated."""


class CheckpointVersionError(CheckpointError):
    pass
