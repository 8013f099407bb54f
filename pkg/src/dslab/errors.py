"""Exception hierarchy shared by every dslab module."""


class DslabError(Exception):
    """Base class for all errors raised by dslab."""


class ContractError(DslabError):
    """A precondition of an operation was violated by its caller."""


class DimensionError(ContractError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(DslabError, ValueError):
    """A configuration value is out of its allowed range."""


class TargetIndexError(ContractError, IndexError):
    """A class index is outside [0, K)."""


class FormatError(DslabError):
    """A file on disk does not follow the expected layout."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{self.path}@{offset}: {message}")


class GenerationError(DslabError):
    """The synthetic scene generator could not satisfy its constraints."""


class ResourceError(DslabError):
    """Not enough input material to satisfy a request."""


class TrainingError(DslabError):
    """Optimisation diverged."""
