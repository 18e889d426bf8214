"""Turn retrieved neighbors into a label distribution and mix it with the
base model's distribution.

A neighbor at distance d contributes kernel weight exp(-d/T); the weight
mass of each label is normalized over the retrieved set, and labels absent
from the retrieved set get exactly zero probability. The final per-token
distribution is lam * p_base + (1 - lam) * p_knn, decoded by argmax with
ties going to the lowest label id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .core import Hyperparams, LabelDistribution
from .dump_io import (
    UNLABELED,
    EmbeddingDump,
    sentence_lengths,
    stack_base_log_probs,
    stack_embeddings,
)
from .engine import NeighborSet, backing_store, batch_retrieve, resolve_threads
from .errors import (
    DimensionMismatchError,
    EmptyNeighborsError,
    InvalidInputError,
    VocabMismatchError,
)


def knn_distribution(
    neighbors: NeighborSet, temperature: float, vocab_size: int
) -> LabelDistribution:
    """Kernel-weighted label distribution over the retrieved set.

    The minimum distance is subtracted before exponentiation; the shift
    cancels in the normalization, so the result is identical to the
    unshifted formula while never underflowing to an all-zero vector.
    """
    if len(neighbors) == 0:
        raise EmptyNeighborsError("cannot form a distribution from zero neighbors")
    if not temperature > 0:
        raise InvalidInputError(f"temperature must be > 0, got {temperature!r}")
    if vocab_size < 1 or int(neighbors.values.max()) >= vocab_size:
        raise InvalidInputError(
            f"neighbor label {int(neighbors.values.max())} outside vocab of size {vocab_size}"
        )
    weights = np.exp(-(neighbors.distances - neighbors.distances[0]) / temperature)
    probs = np.zeros(vocab_size, dtype=np.float64)
    np.add.at(probs, neighbors.values, weights)
    return LabelDistribution(probs / weights.sum())


def interpolate(
    p_base: LabelDistribution, p_knn: LabelDistribution, lam: float
) -> LabelDistribution:
    """lam * p_base + (1 - lam) * p_knn, normalized by construction."""
    if not 0.0 <= lam <= 1.0:
        raise InvalidInputError(f"lambda must lie in [0, 1], got {lam!r}")
    if len(p_base) != len(p_knn):
        raise VocabMismatchError(
            f"distributions cover {len(p_base)} vs {len(p_knn)} labels"
        )
    a = p_base.to_linear().probs
    b = p_knn.to_linear().probs
    return LabelDistribution(lam * a + (1.0 - lam) * b)


@dataclass(frozen=True)
class InterpolationTrace:
    """Everything that went into one token's final label."""

    neighbors: NeighborSet
    p_base: LabelDistribution
    p_knn: LabelDistribution
    p_final: LabelDistribution
    label_id: int


@dataclass(frozen=True)
class PredictionResult:
    """Per-sentence predicted label ids, plus per-token traces if requested."""

    sentences: tuple[np.ndarray, ...]
    traces: tuple[tuple[InterpolationTrace, ...], ...] | None = None


def renormalized_base(dump: EmbeddingDump) -> np.ndarray:
    """exp of the stored float32 log-probs, renormalized row-wise in float64."""
    logp = stack_base_log_probs(dump).astype(np.float64)
    shifted = np.exp(logp - logp.max(axis=1, keepdims=True))
    return shifted / shifted.sum(axis=1, keepdims=True)


def knn_probs_batch(
    dists: np.ndarray, labels: np.ndarray, temperature: float, vocab_size: int
) -> np.ndarray:
    """Row-wise kernel distributions; rows of `dists` are sorted ascending."""
    weights = np.exp(-(dists - dists[:, :1]) / temperature)
    probs = np.zeros((dists.shape[0], vocab_size), dtype=np.float64)
    rows = np.repeat(np.arange(dists.shape[0]), dists.shape[1])
    np.add.at(probs, (rows, labels.ravel()), weights.ravel())
    return probs / probs.sum(axis=1, keepdims=True)


def predict_tokens(
    store_or_index,
    dump: EmbeddingDump,
    hyper: Hyperparams,
    *,
    trace: bool = False,
    threads: int | None = None,
) -> PredictionResult:
    """Retrieve, interpolate, and decode every token of the dump.

    Tokens are processed as one batch; output order is (sentence, token)
    regardless of internal parallelism. k is clamped to the datastore size.
    """
    store = backing_store(store_or_index)
    if dump.vocab != store.vocab:
        raise VocabMismatchError(
            "dump and datastore label vocabularies differ; rebuild one of them"
        )
    if dump.dim != store.m:
        raise DimensionMismatchError(
            f"dump embeddings have dim {dump.dim}, datastore keys have dim {store.m}"
        )
    if dump.sentence_count == 0:
        return PredictionResult(sentences=(), traces=() if trace else None)

    queries = stack_embeddings(dump).astype(np.float64)
    dists, indices = batch_retrieve(
        store_or_index, queries, hyper.k, threads=resolve_threads(threads)
    )
    labels = store.values[indices].astype(np.int64)

    p_base = renormalized_base(dump)
    p_knn = knn_probs_batch(dists, labels, hyper.temperature, store.vocab.size)
    p_final = hyper.lam * p_base + (1.0 - hyper.lam) * p_knn
    chosen = np.argmax(p_final, axis=1).astype(np.int64)  # first max = lowest id

    lengths = sentence_lengths(dump)
    offsets = np.cumsum([0] + lengths)
    sentences = tuple(
        chosen[offsets[i] : offsets[i + 1]].copy() for i in range(len(lengths))
    )

    traces = None
    if trace:
        all_traces = []
        for s_idx, length in enumerate(lengths):
            sent_traces = []
            for t in range(offsets[s_idx], offsets[s_idx] + length):
                ns = NeighborSet(
                    distances=dists[t], indices=indices[t], values=labels[t]
                )
                sent_traces.append(
                    InterpolationTrace(
                        neighbors=ns,
                        p_base=LabelDistribution(p_base[t]),
                        p_knn=LabelDistribution(p_knn[t]),
                        p_final=LabelDistribution(p_final[t]),
                        label_id=int(chosen[t]),
                    )
                )
            all_traces.append(tuple(sent_traces))
        traces = tuple(all_traces)
    return PredictionResult(sentences=sentences, traces=traces)


def prediction_records(result: PredictionResult, dump: EmbeddingDump) -> Iterator[dict]:
    """One JSON-ready record per sentence (the line-delimited output schema)."""
    vocab = dump.vocab
    for s_idx, sent in enumerate(dump.sentences):
        predicted = result.sentences[s_idx]
        gold = sent.gold_labels
        record = {
            "sentence_index": s_idx,
            "words": list(sent.words),
            "gold": (
                None
                if (gold == UNLABELED).any()
                else [vocab.label_of(int(g)) for g in gold]
            ),
            "predicted": [vocab.label_of(int(p)) for p in predicted],
        }
        if result.traces is not None:
            record["trace"] = [
                {
                    "neighbor_distances": trace.neighbors.distances.tolist(),
                    "neighbor_labels": [
                        vocab.label_of(int(v)) for v in trace.neighbors.values
                    ],
                    "p_knn": trace.p_knn.probs.tolist(),
                    "p_final": trace.p_final.probs.tolist(),
                }
                for trace in result.traces[s_idx]
            ]
        yield record


def write_prediction_records(
    result: PredictionResult, dump: EmbeddingDump, sink
) -> int:
    """Write records as JSON lines; returns the number of lines."""
    count = 0
    for record in prediction_records(result, dump):
        sink.write(json.dumps(record) + "\n")
        count += 1
    return count
