"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class NumericError(FloatingPointError):
    """Non-finite values were encountered."""


class ReassemblyError(ValueError):
    """A mask plan does not agree with the token set it is applied to."""


class UnsupportedTeacherError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    """A tensor file could not be parsed.

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SchemaError(ValueError):
    """Tensor names or shapes in a file do not match the expected model."""


class DimensionError(ValueError):
    """Feature widths of two inputs disagree."""
