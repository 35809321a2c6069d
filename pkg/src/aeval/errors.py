"""Exception hierarchy shared across the evaluation pipeline."""

from __future__ import annotations


class AevalError(Exception):
    """Base class for every error raised by this package."""


# --- graph ---------------------------------------------------------------


class GraphError(AevalError):
    pass


class DuplicateId(GraphError):
    pass


class MalformedNode(GraphError):
    pass


class UnknownEndpoint(GraphError):
    pass


class KindMismatch(GraphError):
    pass


class CyclicGraph(GraphError):
    pass


class UnknownNode(GraphError):
    pass


class InvalidTransition(GraphError):
    pass


class ParseError(AevalError):
    """Malformed document; carries line/field diagnostics when known."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        parts = [message]
        if line is not None:
            parts.append(f"(line {line})")
        if field is not None:
            parts.append(f"(field {field})")
        super().__init__(" ".join(parts))


class ValidationFailure(AevalError):
    """Decoded or supplied data violates structural invariants."""

    def __init__(self, message: str, violations: tuple = ()):
        self.violations = violations
        super().__init__(message)


# --- agent / backend -----------------------------------------------------


class BackendError(AevalError):
    pass


class UnparseableReply(AevalError):
    pass


class TurnLimitExceeded(AevalError):
    pass


class PathEscape(AevalError):
    pass


class ToolFailure(AevalError):
    pass


# --- acquisition ---------------------------------------------------------


class UnsupportedScheme(AevalError):
    pass


class NetworkError(AevalError):
    pass


class NotFound(AevalError):
    pass


class ArchiveCorrupt(AevalError):
    pass


class DiskFull(AevalError):
    pass


class NoDocumentation(AevalError):
    pass


class AcquisitionHalt(AevalError):
    """A stage-1 step failed; the artifact is treated as unavailable."""

    def __init__(self, step: str, message: str, diagnostics: dict | None = None):
        self.step = step
        self.diagnostics = diagnostics or {}
        super().__init__(f"acquisition halted at {step}: {message}")


# --- planning / runtime --------------------------------------------------


class InvalidDockerfile(AevalError):
    pass


class BuildError(AevalError):
    """Image construction failed; carries the full build log for diagnosis."""

    def __init__(self, message: str, log: str = ""):
        self.log = log
        super().__init__(message)


class BuildFailedFinal(AevalError):
    pass


class RuntimeUnreachable(AevalError):
    pass


class DaemonUnreachable(RuntimeUnreachable):
    pass


class SessionStartFailure(AevalError):
    pass


class NameConflict(AevalError):
    pass


class ContainerNotRunning(AevalError):
    pass


class SessionDead(AevalError):
    pass


class StatsUnavailable(AevalError):
    pass


class SpawnFailure(AevalError):
    pass


class UnresolvablePlaceholder(AevalError):
    pass


# --- bench / cli ---------------------------------------------------------


class CardinalityMismatch(AevalError):
    pass


class ConfigError(AevalError):
    pass
