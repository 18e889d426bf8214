class ExporterError(Exception):
    """Base class for exporter failures."""


class CorpusParseError(ExporterError):
    """A corpus line could not be parsed; carries its 1-based line number."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class SchemeViolationError(CorpusParseError):
    """A tag is illegal under the configured tagging scheme."""


class ConfigurationError(ExporterError):
    pass


class LabelSetMismatchError(ConfigurationError):
    """Corpus tags that the checkpoint's label set does not cover."""

    def __init__(self, missing: list[str]):
        super().__init__(
            "corpus labels missing from the checkpoint label set: "
            + ", ".join(sorted(missing))
        )
        self.missing = sorted(missing)


class LongSentenceWarning(UserWarning):
    """A sentence exceeded the max sequence length and was split."""
