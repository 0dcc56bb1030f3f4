"""Exception types shared across the package."""


class NwError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(NwError):
    """Operand shapes do not conform to an operation's arity rules."""


class DomainError(NwError):
    """A value is outside an operation's numeric domain (negative sqrt,
    non-positive log, non-finite entries)."""


class ConfigError(NwError):
    """A configuration value is invalid or inconsistent."""


class ContractError(NwError):
    """A call violated an operation's contract (wrong rank, empty input,
    consumed tape)."""


class CoverageError(NwError):
    """A support set cannot cover the required labels.

    Carries the offending (env, class) pair when known; ``env`` is None for
    unconditioned sampling.
    """

    def __init__(self, message, env=None, class_id=None):
        super().__init__(message)
        self.env = env
        self.class_id = class_id


class FormatError(NwError):
    """A serialized artifact (checkpoint) is malformed or truncated."""


class ParseError(NwError):
    """A text input (CSV, config file) failed to parse; carries the line."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class TrainingDiverged(NwError):
    """Training hit a non-finite loss; message carries step diagnostics."""
