"""Exception types shared across the pipeline.

The CLI maps these onto exit codes: validation problems exit 2, stage
failures exit 3.  Retryable transport conditions are modelled separately
so the score collector can distinguish "try again" from "give up".
"""

from __future__ import annotations

__all__ = [
    "FrbenchError",
    "ValidationError",
    "ParseError",
    "ConfigError",
    "FetchError",
    "TransportError",
    "CollectionAbortedError",
    "DegenerateFitError",
    "ComputationError",
    "EmptyEvalSetError",
    "EvaluationError",
    "StageError",
]


class FrbenchError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(FrbenchError):
    """Invalid input data or arguments (CLI exit code 2)."""


class ParseError(ValidationError):
    """A structured input file failed to parse.

    Carries the offending line number when known.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValidationError):
    """Run configuration is malformed or internally inconsistent."""


class FetchError(FrbenchError):
    """Image reference provider failed; the fetch may be retried."""


class TransportError(FrbenchError):
    """A service backend call failed in transit; the call may be retried."""


class CollectionAbortedError(FrbenchError):
    """Too many pairs failed permanently; the collection run was aborted."""


class DegenerateFitError(FrbenchError):
    """Score distribution could not be resolved into two modes."""


class ComputationError(FrbenchError):
    """A numerical routine failed outright (distinct from a rejection)."""


class EvaluationError(FrbenchError):
    """Evaluation could not be carried out on the given inputs."""


class EmptyEvalSetError(EvaluationError):
    """A genuine or impostor score set is empty; no curve is computable."""


class StageError(FrbenchError):
    """A pipeline stage failed (CLI exit code 3)."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage '{stage}': {message}")
