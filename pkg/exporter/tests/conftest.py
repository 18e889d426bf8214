import pytest
import torch
from tokenizers import Tokenizer
from tokenizers.models import WordPiece
from tokenizers.pre_tokenizers import WhitespaceSplit
from tokenizers.processors import TemplateProcessing
from transformers import BertConfig, BertForTokenClassification, PreTrainedTokenizerFast

LABELS = ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]

# Ten sentences; "Washingtonia" wordpieces into 3 subtokens so word-count
# preservation under subword splitting is actually exercised.
CORPUS_SENTENCES = [
    (["Obama", "lives", "in", "Washingtonia", "."], ["B-PER", "O", "O", "B-LOC", "O"]),
    (["Anna", "visited", "Rome", "."], ["B-PER", "O", "B-LOC", "O"]),
    (["Michelle", "met", "Obama", "in", "Springfield", "."], ["B-PER", "O", "B-PER", "O", "B-LOC", "O"]),
    (["the", "old", "town", "of", "New", "Cairo", "."], ["O", "O", "O", "O", "B-LOC", "I-LOC", "O"]),
    (["Poe", "moved", "to", "Washingtonia", "."], ["B-PER", "O", "O", "B-LOC", "O"]),
    (["Anna", "and", "Michelle", "walked", "near", "the", "river", "."], ["B-PER", "O", "B-PER", "O", "O", "O", "O", "O"]),
    (["Obama", "visited", "Cairo", "and", "Rome", "."], ["B-PER", "O", "B-LOC", "O", "B-LOC", "O"]),
    (["the", "city", "of", "Springfield", "."], ["O", "O", "O", "B-LOC", "O"]),
    (["Michelle", "lives", "near", "Rome", "."], ["B-PER", "O", "O", "B-LOC", "O"]),
    (["Anna", "Poe", "met", "Michelle", "at", "the", "river", "."], ["B-PER", "I-PER", "O", "B-PER", "O", "O", "O", "O"]),
]

WORDPIECES = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "the", "in", "at", "of", "to", "and", "lives", "visited", "met", "moved",
    "walked", "near", "old", "town", "city", "river", "New", ".",
    "Obama", "Anna", "Poe", "Mic", "##helle",
    "Wash", "##ington", "##ia", "Spring", "##field", "Rome", "Cairo",
]


def build_tokenizer() -> PreTrainedTokenizerFast:
    mapping = {piece: i for i, piece in enumerate(WORDPIECES)}
    backend = Tokenizer(WordPiece(mapping, unk_token="[UNK]"))
    backend.pre_tokenizer = WhitespaceSplit()
    backend.post_processor = TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B [SEP]",
        special_tokens=[("[CLS]", mapping["[CLS]"]), ("[SEP]", mapping["[SEP]"])],
    )
    return PreTrainedTokenizerFast(
        tokenizer_object=backend,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
    )


def corpus_text() -> str:
    blocks = []
    for words, tags in CORPUS_SENTENCES:
        blocks.append("\n".join(f"{w}\t{t}" for w, t in zip(words, tags)))
    return "\n\n".join(blocks) + "\n"


def train_tiny_model(tokenizer) -> BertForTokenClassification:
    torch.manual_seed(0)
    config = BertConfig(
        vocab_size=len(WORDPIECES),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=2,
        intermediate_size=64,
        max_position_embeddings=64,
        num_labels=len(LABELS),
        id2label=dict(enumerate(LABELS)),
        label2id={label: i for i, label in enumerate(LABELS)},
    )
    model = BertForTokenClassification(config)

    texts = [words for words, _ in CORPUS_SENTENCES]
    enc = tokenizer(texts, is_split_into_words=True, padding=True, return_tensors="pt")
    labels = torch.full(enc["input_ids"].shape, -100, dtype=torch.long)
    for b, (_, tags) in enumerate(CORPUS_SENTENCES):
        seen = set()
        for pos, word_id in enumerate(enc.word_ids(b)):
            if word_id is not None and word_id not in seen:
                labels[b, pos] = LABELS.index(tags[word_id])
                seen.add(word_id)

    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=5e-3)
    for _ in range(200):
        optimizer.zero_grad()
        loss = model(**enc, labels=labels).loss
        loss.backward()
        optimizer.step()
        if loss.item() < 1e-3:
            break
    model.eval()
    return model


@pytest.fixture(scope="session")
def checkpoint_dir(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("checkpoint")
    tokenizer = build_tokenizer()
    model = train_tiny_model(tokenizer)
    tokenizer.save_pretrained(str(path))
    model.save_pretrained(str(path))
    return str(path)


@pytest.fixture(scope="session")
def corpus_path(tmp_path_factory) -> str:
    path = tmp_path_factory.mktemp("corpus") / "fixture.conll"
    path.write_text(corpus_text(), encoding="utf-8")
    return str(path)


@pytest.fixture(scope="session")
def loaded_checkpoint(checkpoint_dir):
    from knn_ner_exporter.export import load_checkpoint

    return load_checkpoint(checkpoint_dir)
