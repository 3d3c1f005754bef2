"""Exception types shared across the toolkit."""


class RaglabError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(RaglabError):
    """Bad or incomplete run configuration (strict parsing violations included)."""


class SchemaError(RaglabError):
    """A data file (JSONL chunks, dataset, cache entry) violates its schema."""


class IndexFormatError(RaglabError):
    """A persisted index is missing, truncated, or has the wrong magic/version."""


class ProviderError(RaglabError):
    """An inference provider call failed after retries."""


class ProviderTimeout(ProviderError):
    """Provider did not answer within its configured timeout."""
