"""Exception types shared across the package."""


class XsgsError(Exception):
    """Base class for all package errors."""


class ShapeError(XsgsError):
    """Tensor or array dimensions do not match an operation's contract."""


class DataError(XsgsError):
    """Values violate a domain contract (non-finite, non-binary, wrong length, ...)."""


class ParseError(XsgsError):
    """A binary or text input could not be parsed."""


class FormatError(XsgsError):
    """Input is syntactically valid but in an unsupported format."""


class CapacityError(XsgsError):
    """Requested carrier count exceeds what the cloud can hold."""


class ExtractionError(XsgsError):
    """Payload decoding received no usable patches."""


class ContractError(XsgsError):
    """An API was called outside its stated contract."""


class CheckpointError(XsgsError):
    """Checkpoint bytes are corrupt, version-mismatched, or shape-incompatible."""


class ConfigError(XsgsError):
    """Configuration file or TrainConfig violates its invariants."""
