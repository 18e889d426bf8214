"""Key-value datastore: one (embedding, gold label) entry per training token.

Persistence uses the KNNS container, all little-endian:

    magic "KNNS" | u32 version | u64 n | u32 m | u32 L
    | vocab: L x (u32 byte_length | UTF-8 bytes)
    | values: n x u32
    | keys:   n x m x f32
    | meta:   32-byte source dump SHA-256 | u64 build timestamp
"""

from __future__ import annotations

import os
import struct
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from typing import BinaryIO

import numpy as np

from .core import LabelVocab
from .dump_io import (
    UNLABELED,
    EmbeddingDump,
    _CountingReader,
    _CountingWriter,
    dump_content_hash,
    read_vocab,
    write_vocab,
)
from .errors import (
    BadMagicError,
    EmptyDatastoreError,
    InvalidInputError,
    InvariantViolationError,
    UnlabeledTokenError,
    VersionMismatchError,
)

MAGIC = b"KNNS"
VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class DatastoreMeta:
    source_hash: bytes  # SHA-256 of the source dump's bytes
    timestamp: int
    n: int
    m: int

    def __post_init__(self):
        if len(self.source_hash) != 32:
            raise InvalidInputError("source hash must be 32 bytes")
        if not 0 <= self.timestamp < 2**64:
            raise InvalidInputError("timestamp must fit in u64")


@dataclass(frozen=True, eq=False)
class Datastore:
    """Immutable key matrix + parallel label values, built from one dump."""

    keys: np.ndarray  # (n, m) float32
    values: np.ndarray  # (n,) uint32
    vocab: LabelVocab
    meta: DatastoreMeta

    def __post_init__(self):
        keys = np.ascontiguousarray(np.asarray(self.keys, dtype="<f4"))
        values = np.ascontiguousarray(np.asarray(self.values, dtype="<u4"))
        if keys.ndim != 2 or keys.shape[0] < 1:
            raise EmptyDatastoreError(
                f"datastore needs a non-empty (n, m) key matrix, got shape {keys.shape}"
            )
        if values.shape != (keys.shape[0],):
            raise InvalidInputError(
                f"values shape {values.shape} does not match {keys.shape[0]} keys"
            )
        if values.size and int(values.max()) >= self.vocab.size:
            raise InvalidInputError(
                f"value {int(values.max())} exceeds vocab size {self.vocab.size}"
            )
        if (self.meta.n, self.meta.m) != keys.shape:
            raise InvalidInputError(
                f"meta records n={self.meta.n}, m={self.meta.m}; keys are {keys.shape}"
            )
        keys.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.keys.shape[0]

    @property
    def m(self) -> int:
        return self.keys.shape[1]

    @cached_property
    def keys64(self) -> np.ndarray:
        """float64 view of the keys, cached for search."""
        arr = self.keys.astype(np.float64)
        arr.setflags(write=False)
        return arr

    @cached_property
    def key_rows(self) -> list[tuple[float, ...]]:
        """Keys as plain Python tuples; used by the naive scan oracle."""
        return [tuple(row) for row in self.keys64]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Datastore):
            return NotImplemented
        return (
            self.vocab == other.vocab
            and self.meta == other.meta
            and np.array_equal(self.keys, other.keys)
            and np.array_equal(self.values, other.values)
        )


def _default_timestamp() -> int:
    # Honor the reproducible-builds convention; a wall clock would break the
    # CLI contract that reruns produce byte-identical outputs.
    return int(os.environ.get("SOURCE_DATE_EPOCH", "0"))


def build_datastore(dump: EmbeddingDump, *, timestamp: int | None = None) -> Datastore:
    """One entry per token, in dump order: key = embedding, value = gold label."""
    if dump.sentence_count == 0 or dump.token_count == 0:
        raise EmptyDatastoreError("cannot build a datastore from an empty dump")
    for s_idx, sent in enumerate(dump.sentences):
        unlabeled = sent.gold_labels == UNLABELED
        if unlabeled.any():
            raise UnlabeledTokenError(s_idx, int(np.argmax(unlabeled)))
    keys = np.concatenate([s.embeddings for s in dump.sentences], axis=0)
    values = np.concatenate([s.gold_labels for s in dump.sentences], axis=0)
    meta = DatastoreMeta(
        source_hash=dump_content_hash(dump),
        timestamp=_default_timestamp() if timestamp is None else timestamp,
        n=keys.shape[0],
        m=keys.shape[1],
    )
    return Datastore(keys=keys, values=values, vocab=dump.vocab, meta=meta)


def save_datastore(store: Datastore, destination: BinaryIO) -> int:
    """Serialize a datastore; returns the number of bytes written."""
    w = _CountingWriter(destination)
    w.write(MAGIC)
    w.write(_U32.pack(VERSION))
    w.write(_U64.pack(store.n))
    w.write(_U32.pack(store.m))
    w.write(_U32.pack(store.vocab.size))
    write_vocab(w, store.vocab)
    w.write(store.values.tobytes())
    w.write(store.keys.tobytes())
    w.write(store.meta.source_hash)
    w.write(_U64.pack(store.meta.timestamp))
    return w.offset


def load_datastore(source: BinaryIO) -> Datastore:
    r = _CountingReader(source)
    magic = r.read_exact(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
    version = _U32.unpack(r.read_exact(4, "version"))[0]
    if version != VERSION:
        raise VersionMismatchError(
            f"unsupported datastore version {version}, expected {VERSION}", offset=4
        )
    n = _U64.unpack(r.read_exact(8, "entry count"))[0]
    m = _U32.unpack(r.read_exact(4, "key dim"))[0]
    vocab_size = _U32.unpack(r.read_exact(4, "vocab size"))[0]
    if n < 1:
        raise InvariantViolationError(f"datastore declares {n} entries", offset=8)
    if m < 1:
        raise InvariantViolationError(f"key dim must be >= 1, got {m}", offset=16)
    if vocab_size < 2:
        raise InvariantViolationError(
            f"vocab size must be >= 2, got {vocab_size}", offset=20
        )
    vocab = read_vocab(r, vocab_size)
    values_offset = r.offset
    values = np.frombuffer(r.read_exact(4 * n, "values block"), dtype="<u4").copy()
    if int(values.max()) >= vocab_size:
        raise InvariantViolationError(
            f"value {int(values.max())} exceeds vocab size {vocab_size}",
            offset=values_offset,
        )
    keys = (
        np.frombuffer(r.read_exact(4 * n * m, "keys block"), dtype="<f4")
        .reshape(n, m)
        .copy()
    )
    source_hash = r.read_exact(32, "source hash")
    timestamp = _U64.unpack(r.read_exact(8, "timestamp"))[0]
    if not r.at_eof():
        raise InvariantViolationError("trailing data after meta block", offset=r.offset)
    meta = DatastoreMeta(source_hash=source_hash, timestamp=timestamp, n=n, m=m)
    return Datastore(keys=keys, values=values, vocab=vocab, meta=meta)


@dataclass(frozen=True)
class DatastoreStats:
    n: int
    m: int
    histogram: dict[str, int]  # label -> entry count, sums to n
    frequency: dict[str, float]  # label -> count / n

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "histogram": dict(self.histogram),
            "frequency": dict(self.frequency),
        }


def datastore_stats(store: Datastore) -> DatastoreStats:
    counts = Counter(int(v) for v in store.values)
    histogram = {
        store.vocab.label_of(label_id): count
        for label_id, count in sorted(counts.items())
    }
    frequency = {label: count / store.n for label, count in histogram.items()}
    return DatastoreStats(n=store.n, m=store.m, histogram=histogram, frequency=frequency)
