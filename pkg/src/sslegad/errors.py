"""Exception hierarchy shared by all pipeline modules."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(PipelineError):
    """Operand shapes do not conform for the requested operation."""


class InvalidAxisError(PipelineError):
    """Axis argument outside the operand's rank."""


class ContractError(PipelineError):
    """A documented call contract was violated (non-scalar loss, missing grad, ...)."""


class ConfigError(PipelineError):
    """Invalid or inconsistent configuration. CLI exit code 2."""


class BudgetError(PipelineError):
    """Selection budget incompatible with the pool it draws from."""


class DataError(PipelineError):
    """Input data violates a value contract (non-normalized probabilities, zero-norm embedding, ...)."""


class InvariantError(PipelineError):
    """A runtime bookkeeping invariant was violated. CLI exit code 3."""
