"""Exception types shared across modules."""


class FormatError(ValueError):
    """A binary asset file is malformed (bad magic, truncation, bad dims)."""


class SceneValidationError(ValueError):
    """A scene description violates its schema; the message names the field."""


class TrainingDiverged(RuntimeError):
    """Training produced a non-finite loss."""
