import numpy as np
import pytest

from knn_ner import DumpSentence, EmbeddingDump, LabelVocab, build_datastore
from knn_ner.core import log_softmax
from knn_ner.datastore import Datastore, DatastoreMeta

BIO_VOCAB = LabelVocab(["O", "B-PER", "I-PER", "B-LOC", "I-LOC"])


def logp_rows(logits) -> np.ndarray:
    """float32 log-softmax rows from arbitrary logits."""
    return log_softmax(np.asarray(logits, dtype=np.float64)).astype("<f4")


def make_sentence(words, gold, embeddings, logits) -> DumpSentence:
    return DumpSentence(
        words=tuple(words),
        gold_labels=np.asarray(gold, dtype="<u4"),
        embeddings=np.asarray(embeddings, dtype="<f4"),
        base_log_probs=logp_rows(logits),
    )


def random_dump(
    rng: np.random.Generator,
    vocab: LabelVocab = BIO_VOCAB,
    dim: int = 4,
    sentence_count: int = 3,
    max_len: int = 6,
    unlabeled_rate: float = 0.0,
) -> EmbeddingDump:
    sentences = []
    for _ in range(sentence_count):
        n = int(rng.integers(1, max_len + 1))
        gold = rng.integers(0, vocab.size, n).astype("<u4")
        if unlabeled_rate > 0:
            mask = rng.random(n) < unlabeled_rate
            gold[mask] = 0xFFFFFFFF
        sentences.append(
            DumpSentence(
                words=tuple(f"w{i}" for i in range(n)),
                gold_labels=gold,
                embeddings=rng.normal(0, 1, (n, dim)).astype("<f4"),
                base_log_probs=logp_rows(rng.normal(0, 2, (n, vocab.size))),
            )
        )
    return EmbeddingDump(vocab=vocab, dim=dim, sentences=tuple(sentences))


def random_store(
    rng: np.random.Generator,
    n: int,
    m: int,
    vocab: LabelVocab = BIO_VOCAB,
) -> Datastore:
    return Datastore(
        keys=rng.normal(0, 1, (n, m)).astype("<f4"),
        values=rng.integers(0, vocab.size, n).astype("<u4"),
        vocab=vocab,
        meta=DatastoreMeta(source_hash=bytes(32), timestamp=0, n=n, m=m),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1138)


@pytest.fixture
def small_dump(rng) -> EmbeddingDump:
    return random_dump(rng, sentence_count=4)


@pytest.fixture
def small_store(small_dump) -> Datastore:
    return build_datastore(small_dump)
