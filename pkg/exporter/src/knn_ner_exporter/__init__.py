"""Exporter: fine-tuned token-classification checkpoints to KNND dumps."""

from .corpus import ColumnCorpus, parse_column_corpus
from .errors import (
    ConfigurationError,
    CorpusParseError,
    ExporterError,
    LabelSetMismatchError,
    LongSentenceWarning,
    SchemeViolationError,
)
from .export import ExportConfig, checkpoint_vocab, export_corpus, export_dump

__version__ = "0.1.0"
