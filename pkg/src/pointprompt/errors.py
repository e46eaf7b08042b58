"""Exception hierarchy shared across the package.

The CLI maps each family onto a distinct exit code, so library code should
raise the most specific class available.
"""


class PPTError(Exception):
    """Base class for all package errors."""


class DimensionError(PPTError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(PPTError, ValueError):
    """A numeric op was called outside its mathematical domain."""


class TapeError(PPTError, RuntimeError):
    """Misuse of the autodiff tape (double backward, missing recording...)."""


class ConfigError(PPTError, ValueError):
    """Invalid experiment, model or training configuration."""


class DataError(PPTError, ValueError):
    """Malformed, truncated or inconsistent dataset / checkpoint content."""


class ParseError(DataError):
    """A binary or text file could not be decoded."""


class NumericError(PPTError, FloatingPointError):
    """Training produced a non-finite loss or parameter."""


class UnknownDomainError(PPTError, KeyError):
    """A domain name or index is not registered with the model."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "unknown domain"
