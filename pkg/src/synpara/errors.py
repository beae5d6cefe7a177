"""Exception taxonomy shared across the package.

Two branches matter for the CLI exit-code contract: ValidationError
(bad inputs/config, exit 1) and ComputeError (runtime/numeric trouble,
exit 2).
"""


class SynparaError(Exception):
    """Base class for all package errors."""


class ValidationError(SynparaError):
    """Bad arguments, config, or file contents. CLI exit code 1."""


class ComputeError(SynparaError):
    """Runtime or numeric failure during computation. CLI exit code 2."""


class DimensionError(ValidationError):
    """Tensor shapes or axes do not line up."""


class ContractError(ValidationError):
    """An operation precondition was violated."""


class DegenerateInputError(ValidationError):
    """Input is structurally valid but numerically degenerate (e.g. zero norm)."""


class EmptyBatchError(ValidationError):
    """An aggregate was requested over zero effective elements."""


class LengthError(ValidationError):
    """A sequence exceeds the configured maximum length."""


class CapacityError(ValidationError):
    """Requested corpus size exceeds what the grammar can supply."""


class TreeSizeError(ValidationError):
    """Input trees exceed the brute-force oracle's size cap."""


class TreeParseError(ValidationError):
    """A linearized parse string is malformed.

    Carries the offending token index when known.
    """

    def __init__(self, message, token_index=None):
        super().__init__(message)
        self.token_index = token_index


class CorpusFormatError(ValidationError):
    """A corpus/vocab/checkpoint file violates its format contract."""

    def __init__(self, message, line=None, field=None):
        super().__init__(message)
        self.line = line
        self.field = field


class NumericError(ComputeError):
    """A non-finite value appeared where finite math was required."""
