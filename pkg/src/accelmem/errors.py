"""Shared error types for configuration and input parsing."""


class ConfigError(ValueError):
    """A config file, model knob, or preset is inconsistent or unusable."""


class TraceError(ValueError):
    """A workload trace file failed to parse; carries the offending line."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = "line %d: %s" % (line_no, message)
        super().__init__(message)


class Busy(RuntimeError):
    """A second session tried to open under an exclusive-access policy."""


class PermissionDenied(PermissionError):
    """The driver refused a mapping request after validating ownership."""


class SessionError(RuntimeError):
    """An operation used a session that is not open."""
