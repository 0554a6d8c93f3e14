"""Exception types shared across the package."""


class OdeMriError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(OdeMriError, ValueError):
    pass


class InvalidArgumentError(OdeMriError, ValueError):
    pass


class CorruptFileError(OdeMriError):
    """A persisted file has a bad magic, version or truncated payload."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class MissingFileError(OdeMriError, FileNotFoundError):
    def __init__(self, path):
        self.path = str(path)
        super().__init__(f"missing file: {self.path}")


class ConfigError(OdeMriError, ValueError):
    """Invalid run configuration; ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class CheckpointMismatchError(OdeMriError):
    pass


class DivergenceError(OdeMriError, FloatingPointError):
    pass
