"""Exception hierarchy shared by all modules.

File-format errors carry the byte offset at which the problem was detected
so corrupt files can be diagnosed without a hex editor.
"""

from __future__ import annotations


class KnnNerError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(KnnNerError, ValueError):
    """An argument violates a documented precondition."""


class MismatchError(InvalidInputError):
    """Two artifacts that must agree (vocab, dimensions) do not."""


class VocabMismatchError(MismatchError):
    pass


class DimensionMismatchError(MismatchError):
    pass


class FormatError(KnnNerError):
    """Base class for binary file-format errors; carries a byte offset."""

    def __init__(self, message: str, *, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class InvariantViolationError(FormatError):
    """A structurally well-formed file violates a content invariant."""


class NormalizationError(InvariantViolationError):
    """Stored log-probabilities do not normalize within tolerance."""


class WriteError(FormatError):
    """The byte sink failed mid-write; offset is the bytes written so far."""


class UnlabeledTokenError(InvalidInputError):
    """A token without a gold label was found where one is required."""

    def __init__(self, sentence_index: int, token_index: int, message: str | None = None):
        msg = message or (
            f"token {token_index} of sentence {sentence_index} has no gold label"
        )
        super().__init__(msg)
        self.sentence_index = sentence_index
        self.token_index = token_index


class EmptyDatastoreError(KnnNerError):
    """A datastore with zero entries was requested or supplied."""


class EmptyNeighborsError(KnnNerError):
    """A neighbor set with zero entries reached the kernel; internal error."""


class RecallFailureError(KnnNerError):
    """The approximate index missed its recall target after escalation."""

    def __init__(self, target: float, measured: float):
        super().__init__(
            f"approximate index recall {measured:.4f} below target {target:.4f} "
            "after parameter escalation"
        )
        self.target = target
        self.measured = measured


class DegenerateLabelWarning(UserWarning):
    """A label had zero training examples; its centroid was omitted."""
