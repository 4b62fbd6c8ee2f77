"""Exception types shared across the package."""


class MblstmError(Exception):
    """Base class for all package errors."""


class DimensionError(MblstmError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(MblstmError, ArithmeticError):
    """A non-finite value (NaN or Inf) reached an operation."""


class ContractError(MblstmError, ValueError):
    """A precondition of an operation was violated."""


class CheckpointError(MblstmError, IOError):
    """A checkpoint could not be read or does not match the expected model."""


class UndefinedCdrError(MblstmError, ValueError):
    """Vertical CDR requested for a mask without any disc pixels."""


class NumericAbort(MblstmError, RuntimeError):
    """Training produced a non-finite loss and was stopped."""
