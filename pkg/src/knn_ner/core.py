"""Shared domain types: label vocabularies, tagging schemes, spans, distributions.

Everything here is immutable after construction and all operations are pure,
so the types are safe to share across threads without coordination.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError

OUTSIDE = "O"

_DIST_TOL = 1e-9


class TaggingScheme(enum.Enum):
    """Per-token tagging convention used by a dataset.

    BIO tags entities as B-TYPE/I-TYPE, BMES as B/M/E-TYPE with S-TYPE for
    singletons. IO carries no positional prefix: a tag is either "O" or the
    bare entity type, so prefixed tags like "I-PER" are illegal under IO.
    """

    BIO = "bio"
    BMES = "bmes"
    IO = "io"

    @property
    def prefixes(self) -> frozenset[str]:
        return _PREFIXES[self]


_PREFIXES = {
    TaggingScheme.BIO: frozenset("BI"),
    TaggingScheme.BMES: frozenset("BMES"),
    TaggingScheme.IO: frozenset(),
}

# Any prefix that belongs to *some* scheme; under IO these mark a mislabeled
# dataset rather than an exotic bare type.
_KNOWN_PREFIXES = frozenset("BIMES")


def split_tag(tag: str, scheme: TaggingScheme) -> tuple[str | None, str | None]:
    """Split a legal tag into (prefix, entity_type); ("O" -> (None, None)).

    Raises InvalidInputError for tags that are not legal under the scheme.
    """
    if not isinstance(tag, str) or not tag:
        raise InvalidInputError(f"tag must be a non-empty string, got {tag!r}")
    if tag == OUTSIDE:
        return None, None
    if scheme is TaggingScheme.IO:
        head, sep, rest = tag.partition("-")
        if sep and rest and head in _KNOWN_PREFIXES:
            raise InvalidInputError(
                f"tag {tag!r} carries prefix {head!r}, illegal under IO scheme"
            )
        return None, tag
    prefix, sep, etype = tag.partition("-")
    if not sep or not etype or prefix not in scheme.prefixes:
        raise InvalidInputError(f"tag {tag!r} is not legal under {scheme.name} scheme")
    return prefix, etype


def is_legal_tag(tag: str, scheme: TaggingScheme) -> bool:
    try:
        split_tag(tag, scheme)
    except InvalidInputError:
        return False
    return True


@dataclass(frozen=True)
class LabelVocab:
    """Ordered label strings with a bijective index mapping.

    Exactly one outside label "O" must be present.
    """

    labels: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __init__(self, labels: Iterable[str]):
        labels = tuple(labels)
        if len(set(labels)) != len(labels):
            raise InvalidInputError("vocabulary labels must be unique")
        if labels.count(OUTSIDE) != 1:
            raise InvalidInputError(
                f'vocabulary must contain exactly one outside label "{OUTSIDE}"'
            )
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "_index", {lab: i for i, lab in enumerate(labels)})

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def outside_id(self) -> int:
        return self._index[OUTSIDE]

    def id_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise InvalidInputError(f"unknown label {label!r}") from None

    def label_of(self, label_id: int) -> str:
        if not 0 <= label_id < len(self.labels):
            raise InvalidInputError(f"label id {label_id} out of range")
        return self.labels[label_id]

    def tags_of(self, label_ids: Iterable[int]) -> list[str]:
        return [self.label_of(int(i)) for i in label_ids]

    def check_scheme(self, scheme: TaggingScheme) -> None:
        for label in self.labels:
            split_tag(label, scheme)


@dataclass(frozen=True)
class Sentence:
    """A tokenized sentence, optionally with per-token gold label ids."""

    words: tuple[str, ...]
    gold: tuple[int, ...] | None = None

    def __post_init__(self):
        if len(self.words) < 1:
            raise InvalidInputError("sentence must contain at least one word")
        if self.gold is not None and len(self.gold) != len(self.words):
            raise InvalidInputError(
                f"gold labels ({len(self.gold)}) and words ({len(self.words)}) differ in length"
            )

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True, order=True)
class EntitySpan:
    """An entity occupying tokens [start, end], both inclusive."""

    entity_type: str
    start: int
    end: int

    def __post_init__(self):
        if self.start < 0 or self.end < self.start:
            raise InvalidInputError(
                f"bad span bounds: start={self.start} end={self.end}"
            )


@dataclass(frozen=True)
class LabelDistribution:
    """A probability vector over the label vocabulary.

    Linear-space vectors must be non-negative and sum to 1 within 1e-9.
    With log_space=True the entries are log-probabilities whose
    log-sum-exp must be 0 within the same tolerance.
    """

    probs: np.ndarray
    log_space: bool = False

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float64).copy()
        if arr.ndim != 1 or arr.size < 1:
            raise InvalidInputError("distribution must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("distribution entries must be finite")
        if self.log_space:
            total = np.logaddexp.reduce(arr)
        else:
            if arr.min() < 0.0:
                raise InvalidInputError("probabilities must be non-negative")
            total = arr.sum()
        target = 0.0 if self.log_space else 1.0
        if abs(float(total) - target) > _DIST_TOL:
            raise InvalidInputError(
                f"distribution does not normalize: got {float(total)!r}, want {target}"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "probs", arr)

    def __len__(self) -> int:
        return self.probs.size

    def to_linear(self) -> "LabelDistribution":
        if not self.log_space:
            return self
        return stable_softmax(self.probs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, LabelDistribution):
            return NotImplemented
        return self.log_space == other.log_space and np.array_equal(
            self.probs, other.probs
        )


@dataclass(frozen=True)
class Hyperparams:
    """Retrieval size k, kernel temperature, and interpolation weight."""

    k: int = 256
    temperature: float = 1.0
    lam: float = 0.5

    def __post_init__(self):
        if not isinstance(self.k, int) or self.k < 1:
            raise InvalidInputError(f"k must be a positive integer, got {self.k!r}")
        if not self.temperature > 0:
            raise InvalidInputError(f"temperature must be > 0, got {self.temperature!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise InvalidInputError(f"lambda must lie in [0, 1], got {self.lam!r}")


def stable_softmax(logits) -> LabelDistribution:
    """Softmax with max-subtraction so huge logits cannot overflow.

    probs[j] = exp(logits[j] - max) / sum_i exp(logits[i] - max)
    """
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise InvalidInputError("logits must be a non-empty 1-D vector")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("logits must be finite")
    shifted = arr - arr.max()
    exps = np.exp(shifted)
    return LabelDistribution(exps / exps.sum())


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax in float64; returns an array, not a distribution."""
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def extract_spans(
    tags: Sequence[str], scheme: TaggingScheme = TaggingScheme.BIO
) -> set[EntitySpan]:
    """Extract maximal entity spans from per-token tags.

    Illegal continuations are repaired leniently: a continuation tag with no
    matching open span starts a new span, and spans left open at "O" or at
    the end of the sentence are closed where they stand. This makes per-token
    argmax decoding well-defined without a structured decoder.
    """
    if len(tags) == 0:
        raise InvalidInputError("tag sequence must be non-empty")
    parsed = [split_tag(t, scheme) for t in tags]

    spans: set[EntitySpan] = set()
    open_type: str | None = None
    open_start = 0

    def close(end: int) -> None:
        nonlocal open_type
        if open_type is not None:
            spans.add(EntitySpan(open_type, open_start, end))
            open_type = None

    for i, (prefix, etype) in enumerate(parsed):
        if etype is None:  # "O"
            close(i - 1)
            continue
        if scheme is TaggingScheme.IO:
            if open_type != etype:
                close(i - 1)
                open_type, open_start = etype, i
            continue
        if scheme is TaggingScheme.BIO:
            if prefix == "B" or open_type != etype:
                close(i - 1)
                open_type, open_start = etype, i
            continue
        # BMES
        if prefix == "S":
            close(i - 1)
            spans.add(EntitySpan(etype, i, i))
        elif prefix == "B":
            close(i - 1)
            open_type, open_start = etype, i
        elif prefix == "M":
            if open_type != etype:
                close(i - 1)
                open_type, open_start = etype, i
        else:  # "E"
            if open_type == etype:
                spans.add(EntitySpan(etype, open_start, i))
                open_type = None
            else:
                close(i - 1)
                spans.add(EntitySpan(etype, i, i))
    close(len(tags) - 1)
    return spans


def render_spans(
    spans: Iterable[EntitySpan],
    length: int,
    scheme: TaggingScheme = TaggingScheme.BIO,
) -> list[str]:
    """Render non-overlapping spans back into a per-token tag sequence."""
    if length < 1:
        raise InvalidInputError("length must be >= 1")
    tags = [OUTSIDE] * length
    ordered = sorted(spans, key=lambda s: (s.start, s.end))
    prev_end = -1
    for span in ordered:
        if span.end >= length:
            raise InvalidInputError(f"span {span} exceeds sentence length {length}")
        if span.start <= prev_end:
            raise InvalidInputError(f"span {span} overlaps a previous span")
        prev_end = span.end
        if scheme is TaggingScheme.IO:
            for i in range(span.start, span.end + 1):
                tags[i] = span.entity_type
        elif scheme is TaggingScheme.BIO:
            tags[span.start] = f"B-{span.entity_type}"
            for i in range(span.start + 1, span.end + 1):
                tags[i] = f"I-{span.entity_type}"
        else:  # BMES
            if span.start == span.end:
                tags[span.start] = f"S-{span.entity_type}"
            else:
                tags[span.start] = f"B-{span.entity_type}"
                for i in range(span.start + 1, span.end):
                    tags[i] = f"M-{span.entity_type}"
                tags[span.end] = f"E-{span.entity_type}"
    return tags
