"""
Exception hierarchy for the oscillator engine.
Every error carries the process exit code the CLI maps it to, plus a
machine-readable detail payload.
"""
from typing import Any, Dict


class OscillatorError(Exception):
    """Base class for all engine errors."""

    exit_code: int = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": type(self).__name__,
            "message": self.message,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, (str, int, float, bool)) or value is None:
        return value
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    try:
        return float(value)
    except (TypeError, ValueError):
        return str(value)


# Configuration (exit 2)
class ConfigError(OscillatorError):
    exit_code = 2


class UsageError(ConfigError):
    """Incompatible command-line options."""


# Numerical failures (exit 3)
class NumericalError(OscillatorError):
    exit_code = 3


class DomainError(NumericalError):
    pass


class SolverError(NumericalError):
    """Newton iteration did not reach the residual tolerance."""


class IllConditionedStepError(NumericalError):
    pass


class StiffnessError(NumericalError):
    """Adaptive step size fell below the underflow floor."""


class MaxStepsError(NumericalError):
    pass


class FitRejectedError(NumericalError):
    pass


class DegenerateMagnitudeError(NumericalError):
    pass


class DegeneratePhaseError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    pass


class DegenerateVarianceError(NumericalError):
    pass


# Broken preconditions (exit 3)
class ContractError(OscillatorError):
    exit_code = 3


class DimensionError(ContractError):
    pass


class TapeStateError(ContractError):
    pass


class DegreeZeroError(ContractError):
    pass


class CapacityError(ContractError):
    pass


class WindowError(ContractError):
    pass


class MaskError(ContractError):
    pass


class PoolingError(ContractError):
    pass


class EmptySoftmaxError(ContractError):
    pass


# Input data (exit 4)
class DataError(OscillatorError):
    exit_code = 4


class ParseError(DataError):
    def __init__(self, message: str, path: Any = None, line: Any = None, **details: Any):
        super().__init__(message, path=str(path) if path is not None else None, line=line, **details)
        self.path = path
        self.line = line


class StratificationError(DataError):
    pass


class MultiRootWarning(UserWarning):
    """Cardano's discriminant admits three real roots."""


class ParameterWarning(UserWarning):
    """Oscillator parameters outside the standard form."""
