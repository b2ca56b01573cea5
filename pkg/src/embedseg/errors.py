"""Exception types shared across the package."""


class EmbedSegError(Exception):
    """Base class for package-specific errors."""


class FormatError(EmbedSegError):
    """A serialized field file is malformed (bad magic, truncated, ...)."""


class DegenerateEmbeddingError(EmbedSegError):
    """A zero-norm embedding reached a cosine-based operation."""


class NoNegativesError(EmbedSegError):
    """A contrastive pair has no negative samples to rank against."""


class ConfigError(EmbedSegError):
    """Invalid or unknown configuration key/value."""
