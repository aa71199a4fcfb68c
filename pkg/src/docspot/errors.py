"""Exception types shared across the engine."""


class DocspotError(Exception):
    """Base class for all engine errors."""


class ParameterError(DocspotError, ValueError):
    """A configuration value violates its documented constraints."""


class InputError(DocspotError, ValueError):
    """An input array has the wrong shape, size or dtype."""


class FormatError(DocspotError, ValueError):
    """A file does not conform to its declared binary or text format."""


class CountError(DocspotError, ValueError):
    """A requested sample count exceeds what is available."""


class DivergenceError(DocspotError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigurationError(DocspotError, ValueError):
    """Mismatched components, e.g. store and model dimensions."""


class CorpusError(DocspotError, ValueError):
    """A document corpus is unusable (empty or wholly unreadable)."""
