"""Errors raised by the toolkit.

Every error subclasses `TrojanboxError` and the closest builtin so callers can
catch either one.

Examples:
    >>> issubclass(ConfigurationError, ValueError)
    True
    >>> str(TrainingError("loss is nan", step=12))
    'loss is nan (step 12)'
"""

# native
from __future__ import annotations
from typing import List
from typing import Optional
from typing import Sequence

__all__ = [
    "TrojanboxError",
    "ConfigurationError",
    "DimensionError",
    "TrainingError",
    "UsageError",
    "PlacementError",
    "EvaluationError",
    "AurocUndefinedError",
    "DataError",
    "NumericalError",
    "DependencyError",
    "ContractViolationError",
]


class TrojanboxError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(TrojanboxError, ValueError):
    """Invalid configuration, optionally with a list of diagnostics.

    Examples:
        >>> err = ConfigurationError("invalid config", ["poison.ratio: must be > 0"])
        >>> err.diagnostics
        ['poison.ratio: must be > 0']
    """

    def __init__(self, message: str, diagnostics: Optional[Sequence[str]] = None):
        super().__init__(message)
        self.diagnostics: List[str] = list(diagnostics or [])


class DimensionError(TrojanboxError, ValueError):
    """Arrays do not have the expected shape."""


class TrainingError(TrojanboxError, RuntimeError):
    """Optimization failed (e.g., non-finite loss) at a given step."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step

    def __str__(self) -> str:
        message = super().__str__()
        return message if self.step is None else f"{message} (step {self.step})"


class UsageError(TrojanboxError, RuntimeError):
    """An object was used before it was ready (e.g., an untrained model)."""


class PlacementError(TrojanboxError, ValueError):
    """A trigger does not fit inside its host image."""


class EvaluationError(TrojanboxError, ValueError):
    """A metric cannot be computed from its inputs."""


class AurocUndefinedError(EvaluationError):
    """AUROC needs both classes; `f1` is still available."""

    def __init__(self, message: str, f1: float):
        super().__init__(message)
        self.f1 = f1


class DataError(TrojanboxError, ValueError):
    """Records are missing required fields."""


class NumericalError(TrojanboxError, ArithmeticError):
    """A numerical precondition failed for a specific sample."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        super().__init__(message)
        self.sample_id = sample_id


class DependencyError(TrojanboxError, FileNotFoundError):
    """An upstream artifact is missing or does not match its recorded hash."""

    def __init__(self, message: str, artifact: str = ""):
        super().__init__(message)
        self.artifact = artifact

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ContractViolationError(TrojanboxError, RuntimeError):
    """A parameter that must stay frozen was modified."""
