"""The KNND embedding-dump interchange format.

A dump carries, per token: the word, its gold label id (or the unlabeled
sentinel), an m-dim float32 embedding, and the base model's float32
log-distribution over the L labels. Byte layout, all little-endian:

    header:   magic "KNND" | u32 version | u32 m | u32 L | u64 sentence_count
    vocab:    L x (u32 byte_length | UTF-8 bytes)
    sentence: u32 token_count | token_count x token_record
    token:    u32 byte_length | UTF-8 word | u32 gold_label
              | m x f32 embedding | L x f32 base_log_probs

The writer is deterministic: equal dumps serialize to identical bytes.
Version starts at 1; any layout change bumps it.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass
from math import ceil
from typing import BinaryIO, Iterable

import numpy as np

from .core import LabelVocab
from .errors import (
    BadMagicError,
    InvalidInputError,
    InvariantViolationError,
    NormalizationError,
    TruncationError,
    VersionMismatchError,
    WriteError,
)

MAGIC = b"KNND"
VERSION = 1
UNLABELED = 0xFFFFFFFF

# |log-sum-exp| tolerance for stored float32 log-distributions.
LOGPROB_TOL = 1e-4

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class _CountingReader:
    """Wraps a byte source, tracking the offset for error reporting."""

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        self.offset = 0

    def read_exact(self, n: int, what: str) -> bytes:
        data = self._stream.read(n)
        if len(data) != n:
            raise TruncationError(
                f"truncated while reading {what}: wanted {n} bytes, got {len(data)}",
                offset=self.offset,
            )
        self.offset += n
        return data

    def at_eof(self) -> bool:
        return self._stream.read(1) == b""


class _CountingWriter:
    """Wraps a byte sink, tracking bytes written and wrapping I/O failures."""

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        self.offset = 0

    def write(self, data: bytes) -> None:
        try:
            self._stream.write(data)
        except OSError as exc:
            raise WriteError(f"sink failed: {exc}", offset=self.offset) from exc
        self.offset += len(data)


def _read_u32(r: _CountingReader, what: str) -> int:
    return _U32.unpack(r.read_exact(4, what))[0]


def _read_u64(r: _CountingReader, what: str) -> int:
    return _U64.unpack(r.read_exact(8, what))[0]


def _read_str(r: _CountingReader, what: str) -> str:
    length = _read_u32(r, f"{what} length")
    start = r.offset
    raw = r.read_exact(length, what)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise InvariantViolationError(
            f"{what} is not valid UTF-8: {exc}", offset=start
        ) from exc


def _write_str(w: _CountingWriter, text: str) -> None:
    raw = text.encode("utf-8")
    w.write(_U32.pack(len(raw)))
    w.write(raw)


def write_vocab(w: _CountingWriter, vocab: LabelVocab) -> None:
    for label in vocab.labels:
        _write_str(w, label)


def read_vocab(r: _CountingReader, size: int) -> LabelVocab:
    start = r.offset
    labels = [_read_str(r, f"vocab entry {i}") for i in range(size)]
    try:
        return LabelVocab(labels)
    except InvalidInputError as exc:
        raise InvariantViolationError(f"bad vocabulary: {exc}", offset=start) from exc


def _as_array(values, dtype: str, shape: tuple[int, ...], what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.shape != shape:
        raise InvalidInputError(f"{what} has shape {arr.shape}, expected {shape}")
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DumpSentence:
    """One sentence of token records with parallel per-token arrays."""

    words: tuple[str, ...]
    gold_labels: np.ndarray  # (n,) uint32, UNLABELED = no gold label
    embeddings: np.ndarray  # (n, m) float32
    base_log_probs: np.ndarray  # (n, L) float32

    def __post_init__(self):
        n = len(self.words)
        if n < 1:
            raise InvalidInputError("sentence must contain at least one token")
        object.__setattr__(self, "words", tuple(self.words))
        gold = _as_array(self.gold_labels, "<u4", (n,), "gold_labels")
        emb = np.asarray(self.embeddings, dtype="<f4")
        logp = np.asarray(self.base_log_probs, dtype="<f4")
        if emb.ndim != 2 or emb.shape[0] != n:
            raise InvalidInputError(
                f"embeddings must be (tokens, dim), got shape {emb.shape} for {n} tokens"
            )
        if logp.ndim != 2 or logp.shape[0] != n:
            raise InvalidInputError(
                f"base_log_probs must be (tokens, labels), got shape {logp.shape}"
            )
        emb = _as_array(emb, "<f4", emb.shape, "embeddings")
        logp = _as_array(logp, "<f4", logp.shape, "base_log_probs")
        if not np.all(np.isfinite(emb)):
            raise InvalidInputError("embeddings must be finite")
        if not np.all(np.isfinite(logp)):
            raise InvalidInputError("base log-probabilities must be finite")
        lse = np.log(np.exp(logp.astype(np.float64)).sum(axis=1))
        if np.abs(lse).max() > LOGPROB_TOL:
            bad = int(np.abs(lse).argmax())
            raise InvalidInputError(
                f"base_log_probs of token {bad} do not normalize: log-sum-exp={lse[bad]:.6g}"
            )
        object.__setattr__(self, "gold_labels", gold)
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "base_log_probs", logp)

    def __len__(self) -> int:
        return len(self.words)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DumpSentence):
            return NotImplemented
        return (
            self.words == other.words
            and np.array_equal(self.gold_labels, other.gold_labels)
            and np.array_equal(self.embeddings, other.embeddings)
            and np.array_equal(self.base_log_probs, other.base_log_probs)
        )


@dataclass(frozen=True, eq=False)
class EmbeddingDump:
    """A sequence of sentences plus the label vocabulary they index into."""

    vocab: LabelVocab
    dim: int
    sentences: tuple[DumpSentence, ...]
    version: int = VERSION

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidInputError(f"embedding dimension must be >= 1, got {self.dim}")
        if self.vocab.size < 2:
            raise InvalidInputError("vocabulary must contain at least 2 labels")
        object.__setattr__(self, "sentences", tuple(self.sentences))
        for s_idx, sent in enumerate(self.sentences):
            if sent.embeddings.shape[1] != self.dim:
                raise InvalidInputError(
                    f"sentence {s_idx} embeddings have dim {sent.embeddings.shape[1]}, "
                    f"dump declares {self.dim}"
                )
            if sent.base_log_probs.shape[1] != self.vocab.size:
                raise InvalidInputError(
                    f"sentence {s_idx} log-probs cover {sent.base_log_probs.shape[1]} labels, "
                    f"vocab has {self.vocab.size}"
                )
            gold = sent.gold_labels
            bad = (gold != UNLABELED) & (gold >= self.vocab.size)
            if bad.any():
                t_idx = int(np.argmax(bad))
                raise InvalidInputError(
                    f"sentence {s_idx} token {t_idx} has label id {int(gold[t_idx])} "
                    f">= vocab size {self.vocab.size}"
                )

    @property
    def sentence_count(self) -> int:
        return len(self.sentences)

    @property
    def token_count(self) -> int:
        return sum(len(s) for s in self.sentences)

    def fully_labeled(self) -> bool:
        return all((s.gold_labels != UNLABELED).all() for s in self.sentences)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingDump):
            return NotImplemented
        return (
            self.version == other.version
            and self.dim == other.dim
            and self.vocab == other.vocab
            and self.sentences == other.sentences
        )


def write_dump(dump: EmbeddingDump, destination: BinaryIO) -> int:
    """Serialize a dump; returns the number of bytes written."""
    w = _CountingWriter(destination)
    w.write(MAGIC)
    w.write(_U32.pack(dump.version))
    w.write(_U32.pack(dump.dim))
    w.write(_U32.pack(dump.vocab.size))
    w.write(_U64.pack(dump.sentence_count))
    write_vocab(w, dump.vocab)
    for sent in dump.sentences:
        w.write(_U32.pack(len(sent)))
        for i, word in enumerate(sent.words):
            _write_str(w, word)
            w.write(_U32.pack(int(sent.gold_labels[i])))
            w.write(sent.embeddings[i].tobytes())
            w.write(sent.base_log_probs[i].tobytes())
    return w.offset


def dump_to_bytes(dump: EmbeddingDump) -> bytes:
    import io

    buf = io.BytesIO()
    write_dump(dump, buf)
    return buf.getvalue()


def dump_content_hash(dump: EmbeddingDump) -> bytes:
    """SHA-256 of the dump's serialized bytes (32 bytes)."""
    return hashlib.sha256(dump_to_bytes(dump)).digest()


def read_dump(source: BinaryIO) -> EmbeddingDump:
    """Parse and validate a dump; inverse of write_dump."""
    r = _CountingReader(source)
    magic = r.read_exact(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = _read_u32(r, "version")
    if version != VERSION:
        raise VersionMismatchError(
            f"unsupported dump version {version}, expected {VERSION}", offset=4
        )
    dim = _read_u32(r, "embedding dim")
    if dim < 1:
        raise InvariantViolationError(f"embedding dim must be >= 1, got {dim}", offset=8)
    vocab_size = _read_u32(r, "vocab size")
    if vocab_size < 2:
        raise InvariantViolationError(
            f"vocab size must be >= 2, got {vocab_size}", offset=12
        )
    sentence_count = _read_u64(r, "sentence count")
    vocab = read_vocab(r, vocab_size)

    sentences = []
    for s_idx in range(sentence_count):
        token_count = _read_u32(r, f"token count of sentence {s_idx}")
        sent_offset = r.offset - 4
        if token_count < 1:
            raise InvariantViolationError(
                f"sentence {s_idx} declares {token_count} tokens", offset=sent_offset
            )
        words = []
        gold = np.empty(token_count, dtype="<u4")
        emb = np.empty((token_count, dim), dtype="<f4")
        logp = np.empty((token_count, vocab_size), dtype="<f4")
        for t_idx in range(token_count):
            words.append(_read_str(r, f"word {t_idx} of sentence {s_idx}"))
            label_offset = r.offset
            label = _read_u32(r, "gold label")
            if label != UNLABELED and label >= vocab_size:
                raise InvariantViolationError(
                    f"gold label {label} of sentence {s_idx} token {t_idx} "
                    f"exceeds vocab size {vocab_size}",
                    offset=label_offset,
                )
            gold[t_idx] = label
            emb[t_idx] = np.frombuffer(
                r.read_exact(4 * dim, "embedding"), dtype="<f4"
            )
            logp_offset = r.offset
            row = np.frombuffer(
                r.read_exact(4 * vocab_size, "base log-probs"), dtype="<f4"
            )
            lse = float(np.log(np.exp(row.astype(np.float64)).sum()))
            if not np.isfinite(row.astype(np.float64)).all() or abs(lse) > LOGPROB_TOL:
                raise NormalizationError(
                    f"base_log_probs of sentence {s_idx} token {t_idx} do not "
                    f"normalize: log-sum-exp={lse:.6g}",
                    offset=logp_offset,
                )
            logp[t_idx] = row
        sentences.append(
            DumpSentence(
                words=tuple(words), gold_labels=gold, embeddings=emb, base_log_probs=logp
            )
        )
    if not r.at_eof():
        raise InvariantViolationError("trailing data after last sentence", offset=r.offset)
    return EmbeddingDump(vocab=vocab, dim=dim, sentences=tuple(sentences), version=version)


def subsample_sentence_ids(count: int, fraction: float, seed: int) -> list[int]:
    """Indices kept by subsample_dump: ceil(fraction*count) of range(count).

    Selection is the first ceil(fraction*count) slots of a partial
    Fisher-Yates shuffle driven by random.Random(seed), returned sorted so
    the original sentence order is preserved.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction!r}")
    if count < 1:
        raise InvalidInputError("cannot subsample an empty dump")
    kept = ceil(fraction * count)
    pool = list(range(count))
    rng = random.Random(seed)
    for i in range(kept):
        j = rng.randrange(i, count)
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:kept])


def subsample_dump(dump: EmbeddingDump, fraction: float, seed: int) -> EmbeddingDump:
    """Keep a seeded uniform sample of sentences, preserving their order."""
    keep = subsample_sentence_ids(dump.sentence_count, fraction, seed)
    return EmbeddingDump(
        vocab=dump.vocab,
        dim=dump.dim,
        sentences=tuple(dump.sentences[i] for i in keep),
        version=dump.version,
    )


def iter_tokens(dump: EmbeddingDump) -> Iterable[tuple[int, int, str, int]]:
    """Yield (sentence_index, token_index, word, gold_label) over all tokens."""
    for s_idx, sent in enumerate(dump.sentences):
        for t_idx, word in enumerate(sent.words):
            yield s_idx, t_idx, word, int(sent.gold_labels[t_idx])


def stack_embeddings(dump: EmbeddingDump) -> np.ndarray:
    """All token embeddings as one (token_count, m) float32 matrix."""
    if dump.sentence_count == 0:
        return np.empty((0, dump.dim), dtype="<f4")
    return np.concatenate([s.embeddings for s in dump.sentences], axis=0)


def stack_base_log_probs(dump: EmbeddingDump) -> np.ndarray:
    if dump.sentence_count == 0:
        return np.empty((0, dump.vocab.size), dtype="<f4")
    return np.concatenate([s.base_log_probs for s in dump.sentences], axis=0)


def stack_gold_labels(dump: EmbeddingDump) -> np.ndarray:
    if dump.sentence_count == 0:
        return np.empty((0,), dtype="<u4")
    return np.concatenate([s.gold_labels for s in dump.sentences], axis=0)


def sentence_lengths(dump: EmbeddingDump) -> list[int]:
    return [len(s) for s in dump.sentences]
