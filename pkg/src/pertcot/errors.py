"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: config errors -> 1, data errors -> 2,
network errors -> 3.
"""


class PertcotError(Exception):
    """Base class for all pipeline errors."""


class ConfigError(PertcotError):
    """Bad configuration: flags, config file, missing fixture entries."""


class CorpusError(PertcotError):
    """Bad or inconsistent data: corpus files, traces, predictions."""


class PromptError(PertcotError):
    """Template rendering rejected its inputs."""


class GatewayError(PertcotError):
    """Base class for endpoint client failures."""


class GatewayAuthError(GatewayError):
    """Authentication rejected by the endpoint; never retried."""


class GatewayProtocolError(GatewayError):
    """Endpoint answered with a body this client cannot interpret."""


class GatewayExhaustedError(GatewayError):
    """Retry budget spent; carries the last failure class in its message."""
