"""Run a fine-tuned token-classification checkpoint over a corpus and emit
KNND dumps.

Each corpus word contributes exactly one token record, regardless of how
many subtokens it splits into: the word representation is the last-layer
hidden state of its first subtoken (or the mean over its subtokens with
mean pooling), and the stored base distribution is the log-softmax of the
classification head at that representation. Sentences whose subtoken count
exceeds the max sequence length are split at word boundaries with a
recorded warning.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from knn_ner.core import LabelVocab, TaggingScheme
from knn_ner.dump_io import DumpSentence, EmbeddingDump, write_dump
from knn_ner.errors import InvalidInputError

from .corpus import ColumnCorpus, parse_column_corpus
from .errors import ConfigurationError, LabelSetMismatchError, LongSentenceWarning

POOLING_MODES = ("first", "mean")


@dataclass(frozen=True)
class ExportConfig:
    checkpoint: str
    corpus: str
    out: str
    scheme: TaggingScheme = TaggingScheme.BIO
    batch_size: int = 16
    device: str = "cpu"
    max_length: int = 128
    pooling: str = "first"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.max_length < 3:  # room for [CLS] + one subtoken + [SEP]
            raise ConfigurationError("max_length must be >= 3")
        if self.pooling not in POOLING_MODES:
            raise ConfigurationError(
                f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}"
            )


def checkpoint_vocab(model) -> LabelVocab:
    """Label vocabulary in the checkpoint head's id order."""
    id2label = model.config.id2label
    labels = [id2label[i] for i in range(len(id2label))]
    try:
        return LabelVocab(labels)
    except InvalidInputError as exc:
        raise ConfigurationError(f"checkpoint label set is unusable: {exc}") from exc


def _check_corpus_labels(corpus: ColumnCorpus, vocab: LabelVocab) -> None:
    known = set(vocab.labels)
    missing = [tag for tag in corpus.tags_seen if tag not in known]
    if missing:
        raise LabelSetMismatchError(missing)


def _word_chunks(
    tokenizer, words: tuple[str, ...], max_length: int
) -> list[tuple[int, int]]:
    """Split a sentence into (start, end) word ranges whose subtoken counts
    fit within max_length (specials included). A single word longer than the
    budget gets its own chunk and is truncated at encode time."""
    enc = tokenizer(list(words), is_split_into_words=True, add_special_tokens=False)
    counts = [0] * len(words)
    for word_id in enc.word_ids(0):
        if word_id is not None:
            counts[word_id] += 1
    budget = max_length - 2
    chunks = []
    start = 0
    used = 0
    for i, count in enumerate(counts):
        if used and used + count > budget:
            chunks.append((start, i))
            start, used = i, 0
        used += count
    chunks.append((start, len(words)))
    return chunks


def _pool_batch(model, tokenizer, batch, pooling, max_length, device):
    """Encode a batch of word chunks; yield (embeddings, log_probs) per chunk."""
    texts = [list(words) for words in batch]
    enc = tokenizer(
        texts,
        is_split_into_words=True,
        return_tensors="pt",
        padding=True,
        truncation=True,
        max_length=max_length,
    )
    enc = enc.to(device)
    with torch.no_grad():
        out = model(**enc, output_hidden_states=True)
    hidden = out.hidden_states[-1].to(torch.float32)
    logits = out.logits.to(torch.float32)

    results = []
    for b, words in enumerate(texts):
        word_ids = enc.word_ids(b)
        positions: list[list[int]] = [[] for _ in words]
        for pos, word_id in enumerate(word_ids):
            if word_id is not None:
                positions[word_id].append(pos)
        if any(not p for p in positions):
            bad = [words[i] for i, p in enumerate(positions) if not p]
            raise ConfigurationError(
                f"words lost by truncation at max_length={max_length}: {bad!r}"
            )
        if pooling == "first":
            first = torch.tensor([p[0] for p in positions])
            emb = hidden[b, first]
            word_logits = logits[b, first]
        else:
            emb = torch.stack([hidden[b, p].mean(dim=0) for p in positions])
            head = getattr(model, "classifier", None)
            if head is None:
                raise ConfigurationError(
                    "mean pooling needs a 'classifier' head on the model"
                )
            with torch.no_grad():
                word_logits = head(emb)
        log_probs = torch.log_softmax(word_logits, dim=-1)
        results.append((emb.cpu().numpy(), log_probs.cpu().numpy()))
    return results


def export_corpus(
    model,
    tokenizer,
    corpus: ColumnCorpus,
    *,
    scheme: TaggingScheme = TaggingScheme.BIO,
    batch_size: int = 16,
    device: str = "cpu",
    max_length: int = 128,
    pooling: str = "first",
) -> EmbeddingDump:
    """Build an embedding dump from an already-loaded checkpoint."""
    vocab = checkpoint_vocab(model)
    vocab.check_scheme(scheme)
    _check_corpus_labels(corpus, vocab)
    model = model.to(device)
    model.eval()
    dim = model.config.hidden_size

    # Chunk long sentences at word boundaries, then batch chunks.
    chunk_plan: list[tuple[int, tuple[str, ...]]] = []  # (sentence idx, words)
    for s_idx, (words, _) in enumerate(corpus.sentences):
        ranges = _word_chunks(tokenizer, words, max_length)
        if len(ranges) > 1:
            warnings.warn(
                f"sentence {s_idx} exceeds max_length={max_length}; "
                f"split into {len(ranges)} chunks at word boundaries",
                LongSentenceWarning,
                stacklevel=2,
            )
        for start, end in ranges:
            chunk_plan.append((s_idx, words[start:end]))

    per_sentence_emb: dict[int, list[np.ndarray]] = {}
    per_sentence_logp: dict[int, list[np.ndarray]] = {}
    for lo in range(0, len(chunk_plan), batch_size):
        batch = chunk_plan[lo : lo + batch_size]
        pooled = _pool_batch(
            model, tokenizer, [words for _, words in batch], pooling, max_length, device
        )
        for (s_idx, _), (emb, logp) in zip(batch, pooled):
            per_sentence_emb.setdefault(s_idx, []).append(emb)
            per_sentence_logp.setdefault(s_idx, []).append(logp)

    sentences = []
    for s_idx, (words, tags) in enumerate(corpus.sentences):
        emb = np.concatenate(per_sentence_emb[s_idx], axis=0).astype("<f4")
        logp = np.concatenate(per_sentence_logp[s_idx], axis=0).astype("<f4")
        gold = np.array([vocab.id_of(tag) for tag in tags], dtype="<u4")
        sentences.append(
            DumpSentence(
                words=words, gold_labels=gold, embeddings=emb, base_log_probs=logp
            )
        )
    return EmbeddingDump(vocab=vocab, dim=dim, sentences=tuple(sentences))


def load_checkpoint(checkpoint: str):
    from transformers import AutoModelForTokenClassification, AutoTokenizer

    tokenizer = AutoTokenizer.from_pretrained(checkpoint)
    model = AutoModelForTokenClassification.from_pretrained(checkpoint)
    return model, tokenizer


def export_dump(config: ExportConfig) -> EmbeddingDump:
    """Parse the corpus, run the checkpoint, and write the dump file."""
    corpus = parse_column_corpus(config.corpus, config.scheme)
    model, tokenizer = load_checkpoint(config.checkpoint)
    dump = export_corpus(
        model,
        tokenizer,
        corpus,
        scheme=config.scheme,
        batch_size=config.batch_size,
        device=config.device,
        max_length=config.max_length,
        pooling=config.pooling,
    )
    import os
    import tempfile

    directory = os.path.dirname(os.path.abspath(config.out)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as stream:
            write_dump(dump, stream)
        os.replace(tmp, config.out)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return dump
