"""Exception hierarchy shared by all modules."""


class EnsembleRLError(Exception):
    """Base class for package errors."""


class ConfigurationError(EnsembleRLError, ValueError):
    pass


class ContractViolation(EnsembleRLError, ValueError):
    """A caller broke an operation's precondition (shape, range, ordering)."""


class ParseError(EnsembleRLError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericError(EnsembleRLError, ArithmeticError):
    """Non-finite values reached a parameter update."""


class InsufficientDataError(EnsembleRLError, ValueError):
    pass


class UndefinedMetricError(EnsembleRLError, ValueError):
    pass


class ComparabilityError(EnsembleRLError, ValueError):
    pass


class CheckpointIntegrityError(EnsembleRLError, ValueError):
    pass


class CheckpointVersionError(EnsembleRLError, ValueError):
    pass


class RunError(EnsembleRLError, RuntimeError):
    """Every job of a population failed."""
