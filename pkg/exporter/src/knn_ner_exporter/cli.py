"""Exporter command line: checkpoint + column corpus in, KNND dump out.

Exit codes mirror the engine CLI: 0 success, 2 usage, 3 corpus/data errors,
4 label-set mismatches, 5 internal.
"""

from __future__ import annotations

import argparse
import os
import sys

from knn_ner.core import TaggingScheme

from .errors import (
    ConfigurationError,
    CorpusParseError,
    ExporterError,
    LabelSetMismatchError,
)
from .export import POOLING_MODES, ExportConfig, export_dump


def _scheme(text: str) -> TaggingScheme:
    try:
        return TaggingScheme(text.lower())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown scheme {text!r}; choose from bio, bmes, io"
        ) from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knn-ner-export",
        description="Emit a KNND embedding dump from a fine-tuned token-classification checkpoint",
    )
    parser.add_argument("--checkpoint", required=True, help="model directory or hub id")
    parser.add_argument("--corpus", required=True, help="column-format token/tag file")
    parser.add_argument("--out", required=True, help="output dump path")
    parser.add_argument("--scheme", type=_scheme, default=TaggingScheme.BIO)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--device", default="cpu")
    parser.add_argument("--max-length", type=int, default=128)
    parser.add_argument("--pooling", choices=POOLING_MODES, default="first")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not os.path.isfile(args.corpus):
        print(f"error: no such file: {args.corpus}", file=sys.stderr)
        return 2
    try:
        config = ExportConfig(
            checkpoint=args.checkpoint,
            corpus=args.corpus,
            out=args.out,
            scheme=args.scheme,
            batch_size=args.batch_size,
            device=args.device,
            max_length=args.max_length,
            pooling=args.pooling,
        )
        dump = export_dump(config)
    except LabelSetMismatchError as exc:
        print(f"label mismatch: {exc}", file=sys.stderr)
        return 4
    except CorpusParseError as exc:
        print(f"corpus error: {exc}", file=sys.stderr)
        return 3
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ExporterError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 5
    print(
        f"{dump.sentence_count} sentences / {dump.token_count} tokens "
        f"({dump.dim}-dim embeddings, {dump.vocab.size} labels) -> {args.out}"
    )
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
