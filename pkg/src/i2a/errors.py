"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Shapes or settings of adapters and inputs do not fit together."""


class InstructionParseError(ValueError):
    """A language-model response could not be turned into an edit instruction."""


class TransportError(RuntimeError):
    """A remote model service could not be reached after all retries."""


class OfflineError(RuntimeError):
    """Offline mode needs a value that is neither cached nor in the metadata."""


class RequestRejected(RuntimeError):
    """A remote service refused the request (HTTP 4xx other than 429); retrying will not help."""
