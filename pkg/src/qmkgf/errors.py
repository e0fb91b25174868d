"""Exception types shared across the package."""

from __future__ import annotations


class QmkgfError(Exception):
    """Base class for all package errors."""


class ValidationError(QmkgfError):
    """An argument or record violates a documented precondition."""


class NotFoundError(QmkgfError):
    """A referenced entity, chunk, or file is unknown."""


class ParseError(QmkgfError):
    """A persisted file is malformed.

    ``line`` is the 1-based line number of the offending record when the
    format is line-delimited, otherwise None.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UndefinedSimilarityError(ValidationError):
    """Cosine similarity was requested for a zero vector."""


class ThresholdError(QmkgfError):
    """A fusion threshold could not be derived from the base subgraph."""


class ModelServiceError(QmkgfError):
    """A model-service call failed (transport, HTTP status, or bad payload)."""


class GenerationError(ModelServiceError):
    """Answer generation failed; carries the prompt so the call can be replayed."""

    def __init__(self, message: str, prompt: str):
        super().__init__(message)
        self.prompt = prompt
