"""Column-format corpus reader: one "word<TAB or SPACE>tag" pair per line,
blank line between sentences."""

from __future__ import annotations

from dataclasses import dataclass

from knn_ner.core import TaggingScheme, split_tag
from knn_ner.errors import InvalidInputError

from .errors import CorpusParseError, SchemeViolationError


@dataclass(frozen=True)
class ColumnCorpus:
    sentences: tuple[tuple[tuple[str, ...], tuple[str, ...]], ...]  # (words, tags)
    tags_seen: tuple[str, ...]  # sorted unique tags

    @property
    def sentence_count(self) -> int:
        return len(self.sentences)

    @property
    def token_count(self) -> int:
        return sum(len(words) for words, _ in self.sentences)


def parse_column_corpus(path: str, scheme: TaggingScheme = TaggingScheme.BIO) -> ColumnCorpus:
    """Read and validate a corpus file; tags must be legal under the scheme."""
    sentences = []
    words: list[str] = []
    tags: list[str] = []
    seen: set[str] = set()

    def flush() -> None:
        if words:
            sentences.append((tuple(words), tuple(tags)))
            words.clear()
            tags.clear()

    with open(path, "r", encoding="utf-8") as handle:
        for line_number, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line:
                flush()
                continue
            fields = line.split()
            if len(fields) != 2:
                raise CorpusParseError(
                    line_number,
                    f"expected 'word tag', got {len(fields)} fields: {line!r}",
                )
            word, tag = fields
            try:
                split_tag(tag, scheme)
            except InvalidInputError as exc:
                raise SchemeViolationError(line_number, str(exc)) from exc
            words.append(word)
            tags.append(tag)
            seen.add(tag)
    flush()
    return ColumnCorpus(sentences=tuple(sentences), tags_seen=tuple(sorted(seen)))
