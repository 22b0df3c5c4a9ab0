"""Exception hierarchy shared by every module."""


class SkillRecError(Exception):
    """Base class for all package errors."""


class DomainError(SkillRecError, ValueError):
    """An input value lies outside the domain of an operation."""


class ContractViolation(SkillRecError, ValueError):
    """A caller broke a documented precondition (e.g. batch too small)."""


class DatasetParseError(SkillRecError, ValueError):
    """A dataset file could not be parsed.

    ``line`` is 1-based and ``None`` when the error is not tied to a line.
    """

    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        self.message = message
        where = f"{self.path}:{line}" if line is not None else self.path
        super().__init__(f"{where}: {message}")


class TrainingDiverged(SkillRecError, RuntimeError):
    """Raised when a training loss becomes NaN or infinite."""

    def __init__(self, message, dump_path=None):
        self.dump_path = dump_path
        super().__init__(message if dump_path is None else f"{message} (batch dumped to {dump_path})")


class ConfigError(SkillRecError, ValueError):
    """Invalid or unknown configuration key/value."""
