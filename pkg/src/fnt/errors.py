"""Shared exception types."""


class FntError(Exception):
    """Base class for all package errors."""


class ShapeError(FntError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {' vs '.join(map(str, self.shapes))}")


class NumericsError(FntError):
    """Non-finite or otherwise invalid numeric input."""


class FormatError(FntError):
    """Malformed binary or manifest file."""


class ValidationError(FntError):
    """Invalid configuration or CLI input. Exit code 2."""


class DivergenceError(FntError):
    """Training produced a non-finite loss. Exit code 3."""


class MissingEmbeddingError(FntError):
    """Frozen context table does not cover requested token ids."""

    def __init__(self, missing_ids):
        self.missing_ids = sorted(set(int(i) for i in missing_ids))
        super().__init__(f"frozen context table missing rows for token ids {self.missing_ids}")
