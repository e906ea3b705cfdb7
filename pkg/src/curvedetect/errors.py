"""Exception hierarchy shared across the engine.

Two broad families matter for exit codes: ValidationError (bad inputs,
bad config, violated preconditions) and BackendError (a model backend
misbehaved or is unreachable).
"""


class CurveDetectError(Exception):
    """Base class for all engine errors."""


class ValidationError(CurveDetectError):
    """Invalid argument, config, or violated precondition."""


class CorpusError(ValidationError):
    """Corpus file unreadable, malformed, or empty after filtering."""


class SpanPlacementError(ValidationError):
    """Text cannot accommodate the requested mask spans."""


class ManifestError(ValidationError):
    """Experiment manifest missing, malformed, or inconsistent."""


class BackendError(CurveDetectError):
    """A generation/scoring/fill backend failed."""


class TransportError(BackendError):
    """HTTP transport failed after the configured retries."""


class ProtocolError(BackendError):
    """Backend answered, but the response violates the wire protocol."""


class CapabilityError(BackendError):
    """Backend permanently lacks a required capability (e.g. logprobs)."""


class FillProtocolError(ProtocolError):
    """Fill backend returned the wrong number of span fills."""


class OfflineError(BackendError):
    """A network call was attempted while running in offline mode."""


class GenerationError(BackendError):
    """Pool building could not obtain an acceptable generation."""
