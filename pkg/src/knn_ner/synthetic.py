"""Seeded synthetic benchmark: a desk-scale stand-in for encoder dumps.

Sentences get label sequences from a simple transition prior, embeddings
are per-label cluster centers plus isotropic noise plus a small context
term from neighboring tokens' centers, and the stored base distribution is
a softmax over negative distances to the centers. A configurable fraction
of tokens gets a deliberately misleading base distribution (its mass moved
to a wrong label) so retrieval has something to fix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .core import LabelVocab, TaggingScheme, EntitySpan, log_softmax, render_spans
from .dump_io import (
    UNLABELED,
    DumpSentence,
    EmbeddingDump,
    stack_embeddings,
    stack_gold_labels,
)
from .errors import DegenerateLabelWarning, InvalidInputError, UnlabeledTokenError

_ENTITY_START_PROB = 0.35
_ENTITY_LENGTH_P = 0.5
_MAX_ENTITY_LENGTH = 4
_CORRUPTION_MARGIN = 2.0


@dataclass(frozen=True)
class SyntheticConfig:
    entity_types: int = 4
    scheme: TaggingScheme = TaggingScheme.BIO
    train_sentences: int = 400
    test_sentences: int = 200
    mean_sentence_length: float = 12.0
    dim: int = 16
    center_scale: float = 1.0
    cluster_spread: float = 0.6
    context_weight: float = 0.25
    corruption_rate: float = 0.0
    seed: int = 90125

    def __post_init__(self):
        for name in ("entity_types", "train_sentences", "test_sentences", "dim"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be positive")
        if self.mean_sentence_length < 1:
            raise InvalidInputError("mean_sentence_length must be >= 1")
        if self.center_scale <= 0 or self.cluster_spread < 0 or self.context_weight < 0:
            raise InvalidInputError("scales must be positive (spread/context may be 0)")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise InvalidInputError("corruption_rate must lie in [0, 1]")


# The canonical seeded benchmark used across tests and docs.
DEFAULT_BENCHMARK = SyntheticConfig(corruption_rate=0.3)


def synthetic_vocab(entity_types: int, scheme: TaggingScheme) -> LabelVocab:
    types = [f"E{i}" for i in range(entity_types)]
    labels = ["O"]
    for t in types:
        if scheme is TaggingScheme.BIO:
            labels += [f"B-{t}", f"I-{t}"]
        elif scheme is TaggingScheme.BMES:
            labels += [f"B-{t}", f"M-{t}", f"E-{t}", f"S-{t}"]
        else:
            labels.append(t)
    return LabelVocab(labels)


def _sample_tags(
    rng: np.random.Generator, length: int, entity_types: int, scheme: TaggingScheme
) -> list[str]:
    spans = []
    i = 0
    while i < length:
        if rng.random() < _ENTITY_START_PROB:
            etype = f"E{int(rng.integers(entity_types))}"
            span_len = min(int(rng.geometric(_ENTITY_LENGTH_P)), _MAX_ENTITY_LENGTH, length - i)
            spans.append(EntitySpan(etype, i, i + span_len - 1))
            i += span_len
        else:
            i += 1
    return render_spans(spans, length, scheme)


def gen_synthetic(config: SyntheticConfig) -> tuple[EmbeddingDump, EmbeddingDump]:
    """Generate (train dump, test dump) sharing one set of cluster centers."""
    rng = np.random.default_rng(config.seed)
    vocab = synthetic_vocab(config.entity_types, config.scheme)
    centers = rng.normal(0.0, config.center_scale, (vocab.size, config.dim))

    def gen_split(sentence_count: int) -> EmbeddingDump:
        sentences = []
        for _ in range(sentence_count):
            length = int(rng.poisson(config.mean_sentence_length - 1)) + 1
            tags = _sample_tags(rng, length, config.entity_types, config.scheme)
            gold = np.array([vocab.id_of(t) for t in tags], dtype="<u4")

            own = centers[gold]
            noise = rng.normal(0.0, config.cluster_spread, (length, config.dim))
            context = np.zeros_like(own)
            if length > 1:
                context[1:] += centers[gold[:-1]]
                context[:-1] += centers[gold[1:]]
                counts = np.full(length, 2.0)
                counts[0] = counts[-1] = 1.0
                context /= counts[:, None]
            embeddings = own + noise + config.context_weight * context

            diff = embeddings[:, None, :] - centers[None, :, :]
            scores = -np.sqrt(np.einsum("nlm,nlm->nl", diff, diff))
            corrupted = rng.random(length) < config.corruption_rate
            for t in np.flatnonzero(corrupted):
                wrong = int(rng.integers(vocab.size - 1))
                if wrong >= int(gold[t]):
                    wrong += 1
                scores[t, wrong] = scores[t].max() + _CORRUPTION_MARGIN
            log_probs = log_softmax(scores)

            sentences.append(
                DumpSentence(
                    words=tuple(f"w{i}" for i in range(length)),
                    gold_labels=gold,
                    embeddings=embeddings.astype("<f4"),
                    base_log_probs=log_probs.astype("<f4"),
                )
            )
        return EmbeddingDump(vocab=vocab, dim=config.dim, sentences=tuple(sentences))

    train = gen_split(config.train_sentences)
    test = gen_split(config.test_sentences)
    return train, test


def benchmark_with(**overrides) -> SyntheticConfig:
    """DEFAULT_BENCHMARK with selected fields replaced."""
    return replace(DEFAULT_BENCHMARK, **overrides)


@dataclass(frozen=True)
class CentroidModel:
    """Per-label centroid classifier emitting softmax over negative distances.

    Labels with no training examples keep a uniform floor probability; the
    remaining mass goes through the softmax over present labels.
    """

    vocab: LabelVocab
    centroids: np.ndarray  # (L, m) float64; rows of absent labels are zero
    present: np.ndarray  # (L,) bool
    floor: float = 1e-6

    def predict_log_probs(self, embeddings) -> np.ndarray:
        emb = np.asarray(embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[1] != self.centroids.shape[1]:
            raise InvalidInputError(
                f"embeddings have shape {emb.shape}, centroids are {self.centroids.shape}"
            )
        present_ids = np.flatnonzero(self.present)
        diff = emb[:, None, :] - self.centroids[None, present_ids, :]
        scores = -np.sqrt(np.einsum("nlm,nlm->nl", diff, diff))
        log_present = log_softmax(scores)
        missing = int(self.present.size - present_ids.size)
        out = np.full((emb.shape[0], self.present.size), np.log(self.floor))
        scale = 1.0 - missing * self.floor
        out[:, present_ids] = log_present + np.log(scale)
        return out

    def predict(self, embeddings) -> np.ndarray:
        return np.argmax(self.predict_log_probs(embeddings), axis=1).astype(np.int64)


def fit_centroid_baseline(dump: EmbeddingDump, *, floor: float = 1e-6) -> CentroidModel:
    """Mean embedding per label over a labeled dump."""
    gold = stack_gold_labels(dump)
    if gold.size == 0:
        raise InvalidInputError("cannot fit a centroid model on an empty dump")
    if (gold == UNLABELED).any():
        flat = int(np.argmax(gold == UNLABELED))
        lengths = [len(s) for s in dump.sentences]
        s_idx = 0
        while flat >= lengths[s_idx]:
            flat -= lengths[s_idx]
            s_idx += 1
        raise UnlabeledTokenError(s_idx, flat)
    emb = stack_embeddings(dump).astype(np.float64)
    vocab = dump.vocab
    centroids = np.zeros((vocab.size, emb.shape[1]))
    present = np.zeros(vocab.size, dtype=bool)
    for label_id in range(vocab.size):
        mask = gold == label_id
        if mask.any():
            centroids[label_id] = emb[mask].mean(axis=0)
            present[label_id] = True
        else:
            warnings.warn(
                f"label {vocab.label_of(label_id)!r} has no examples; centroid omitted",
                DegenerateLabelWarning,
                stacklevel=2,
            )
    if not present.any():
        raise InvalidInputError("no label has any examples")
    centroids.setflags(write=False)
    present.setflags(write=False)
    return CentroidModel(vocab=vocab, centroids=centroids, present=present, floor=floor)


def apply_centroid_model(model: CentroidModel, dump: EmbeddingDump) -> EmbeddingDump:
    """Replace every sentence's stored base log-probs with the model's."""
    if model.vocab != dump.vocab:
        raise InvalidInputError("model and dump vocabularies differ")
    sentences = []
    for sent in dump.sentences:
        log_probs = model.predict_log_probs(sent.embeddings.astype(np.float64))
        sentences.append(
            DumpSentence(
                words=sent.words,
                gold_labels=sent.gold_labels,
                embeddings=sent.embeddings,
                base_log_probs=log_probs.astype("<f4"),
            )
        )
    return EmbeddingDump(vocab=dump.vocab, dim=dump.dim, sentences=tuple(sentences))
