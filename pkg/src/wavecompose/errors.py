"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class InputError(ValueError):
    """User-supplied data or arguments are invalid."""


class AlignmentError(InputError):
    """Audio and conditioning series do not line up."""


class FormatError(ValueError):
    """A file does not follow the expected binary/text layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    """Optimization diverged (non-finite loss or gradient)."""


class UndefinedCorrelationError(InputError):
    """A series has zero variance, so its normalized correlation is undefined."""
