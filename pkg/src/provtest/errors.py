"""Exception hierarchy.

Configuration problems and backend problems are kept apart so callers (and the
CLI exit codes) can tell a bad invocation from an unreachable model.
"""


class ProvenanceError(Exception):
    pass


class ConfigurationError(ProvenanceError, ValueError):
    """Invalid argument or run configuration."""


class BackendError(ProvenanceError):
    """A model could not answer a query."""

    retryable = False


class BackendUnreachable(BackendError):
    retryable = True


class RateLimited(BackendError):
    retryable = True


class MalformedResponse(BackendError):
    pass


class CacheMiss(BackendError):
    """Replay backend has no recorded answer for a prompt."""


class CacheCorrupted(BackendError):
    pass


class PromptSourceExhausted(ProvenanceError):
    pass
