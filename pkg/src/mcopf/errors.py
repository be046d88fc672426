"""Exception hierarchy shared by all mcopf modules."""

from __future__ import annotations


class McopfError(Exception):
    """Base class for every error raised by this package."""


class NetworkParseError(McopfError):
    """Input text is not valid JSON."""

    def __init__(self, msg: str, line: int, column: int):
        super().__init__(f"{msg} (line {line}, column {column})")
        self.line = line
        self.column = column


class SchemaError(McopfError):
    """A required field is missing or has the wrong shape."""

    def __init__(self, field: str, msg: str = "missing required field"):
        super().__init__(f"{field}: {msg}")
        self.field = field


class NetworkReferenceError(McopfError):
    """An element references a bus (or conductor) that does not exist."""


class SingularMatrixError(McopfError):
    pass


class ContractError(McopfError):
    """A documented precondition of an operation was violated."""


class ModelError(McopfError):
    """The network lacks something a formulation needs (e.g. an objective generator)."""


class UnsupportedExpressionError(McopfError):
    """Expression degree exceeds two."""


class NoSolutionError(McopfError):
    """The circuit equations have no solution reachable by Newton's method."""


class SingularLoadError(NoSolutionError):
    """Voltage across a constant-power load collapsed to (numerically) zero."""


class EmbeddingError(McopfError):
    """A point lacks values needed to populate a formulation's variables."""
