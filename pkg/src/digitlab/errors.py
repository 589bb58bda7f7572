class DigitlabError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(DigitlabError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DigitlabError, ValueError):
    """A documented precondition was violated by the caller."""


class FormatError(DigitlabError, ValueError):
    """A file does not follow its binary format."""


class ConsistencyError(DigitlabError, ValueError):
    """Two related inputs disagree (e.g. image and label counts)."""


class ChecksumError(FormatError):
    """Stored CRC32 does not match the file contents."""


class NonFiniteError(DigitlabError, FloatingPointError):
    """A loss or gradient became NaN or infinite during training."""
