"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameters (CLI exit code 2)."""


class DivergedTraining(FloatingPointError):
    """Non-finite values appeared during training (CLI exit code 3)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class BoundViolation(AssertionError):
    """A diagnostic inequality that must hold was found violated."""


class IdxFormatError(ValueError):
    """Base class for malformed IDX containers."""


class BadMagic(IdxFormatError):
    pass


class TruncatedPayload(IdxFormatError):
    pass


class CountMismatch(IdxFormatError):
    pass


class ArtifactFormatError(ValueError):
    """Malformed checkpoint or grid dump (CLI exit code 4)."""
