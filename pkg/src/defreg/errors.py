"""Exception types shared across the package."""


class DefregError(Exception):
    """Base class for all defreg-specific failures."""


class FormatError(DefregError):
    """A volume, field, mesh, or table file violates its on-disk format."""


class ConfigError(DefregError):
    """A configuration file or value is invalid."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SingularSystemError(DefregError):
    """The assembled system cannot be solved uniquely."""


class StageError(DefregError):
    """A pipeline stage failed; carries the stage name for CLI reporting."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage={stage}: {message}")
        self.stage = stage
