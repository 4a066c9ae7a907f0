"""Exception hierarchy shared by every module.

The CLI maps each family to its own exit code.
"""


class EMTMError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EMTMError, ValueError):
    """Invalid hyperparameter or configuration value."""


class ShapeError(EMTMError, ValueError):
    """Operand shapes do not agree."""


class ContractError(EMTMError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(EMTMError, ValueError):
    """Malformed teacher output or file record."""


class OrderingError(FormatError):
    """A (start, end) pair with start after end."""


class ParseError(FormatError):
    """A file line could not be parsed.

    Carries the 1-based line number and, when known, the sample id.
    """

    def __init__(self, message, path=None, line=None, sample_id=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if sample_id is not None:
            where.append(f"sample {sample_id!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.path = path
        self.line = line
        self.sample_id = sample_id


class NumericalError(EMTMError, ArithmeticError):
    """Training produced a non-finite value."""
