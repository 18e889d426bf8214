"""Command-line surface: build/predict/eval/sweep/synth/lowres.

Exit codes: 0 success, 2 usage (bad flags, missing inputs), 3 data errors
(bad file contents, unlabeled tokens), 4 vocab/dimension mismatches,
5 internal errors. Output files are written to a temporary sibling and
atomically renamed, so failed runs never leave partial outputs.
"""

from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile

from .core import Hyperparams, TaggingScheme
from .datastore import (
    build_datastore,
    datastore_stats,
    load_datastore,
    save_datastore,
)
from .dump_io import read_dump, write_dump
from .engine import (
    ApproxIndexParams,
    build_approx_index,
    load_approx_index,
    save_approx_index,
)
from .errors import (
    EmptyDatastoreError,
    FormatError,
    InvalidInputError,
    KnnNerError,
    MismatchError,
    UnlabeledTokenError,
)
from .evaluate import (
    curve_to_csv,
    evaluate_dump,
    format_metrics,
    low_resource_curve,
    report_records,
    sweep,
)
from .interpolate import predict_tokens, write_prediction_records
from .synthetic import SyntheticConfig, gen_synthetic

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_MISMATCH = 4
EXIT_INTERNAL = 5


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _positive_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {value}")
    return value


def _unit_float(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in [0, 1], got {value}")
    return value


def _fraction(text: str) -> float:
    value = _unit_float(text)
    if value == 0.0:
        raise argparse.ArgumentTypeError("fraction must be > 0")
    return value


def _int_list(text: str) -> list[int]:
    return [_positive_int(part) for part in text.split(",") if part]


def _float_list(kind) -> "callable":
    def parse(text: str) -> list[float]:
        values = [kind(part) for part in text.split(",") if part]
        if not values:
            raise argparse.ArgumentTypeError("list must be non-empty")
        return values

    return parse


def _scheme(text: str) -> TaggingScheme:
    try:
        return TaggingScheme(text.lower())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"unknown scheme {text!r}; choose from bio, bmes, io"
        ) from None


def _require_file(path: str) -> None:
    if not os.path.isfile(path):
        raise _UsageError(f"no such file: {path}")


class _UsageError(Exception):
    pass


def _atomic_write_bytes(path: str, write_fn) -> None:
    """write_fn(stream) into a temp sibling, then atomically rename."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as stream:
            write_fn(stream)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, lambda stream: stream.write(text.encode("utf-8")))


def _load_dump(path: str):
    _require_file(path)
    with open(path, "rb") as stream:
        return read_dump(stream)


def _load_store(path: str):
    _require_file(path)
    with open(path, "rb") as stream:
        return load_datastore(stream)


def _resolve_index(args, store):
    """exact -> the datastore itself; approx -> built or loaded graph index."""
    if args.index == "exact":
        return store
    params = ApproxIndexParams(
        degree=args.graph_degree,
        construction_beam=args.construction_beam,
        search_beam=args.search_beam,
        target_recall=args.target_recall,
    )
    path = getattr(args, "index_path", None)
    if path and os.path.isfile(path):
        with open(path, "rb") as stream:
            return load_approx_index(stream, store)
    index = build_approx_index(store, params)
    if path:
        _atomic_write_bytes(path, lambda stream: save_approx_index(index, stream))
    return index


def _add_hyper_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--k", type=_positive_int, default=256, help="neighbors to retrieve")
    parser.add_argument(
        "--lambda",
        dest="lam",
        type=_unit_float,
        default=0.5,
        help="weight of the base distribution in the interpolation",
    )
    parser.add_argument(
        "--temperature", type=_positive_float, default=1.0, help="kernel temperature"
    )


def _add_index_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--index", choices=("exact", "approx"), default="exact")
    parser.add_argument("--graph-degree", type=_positive_int, default=16)
    parser.add_argument("--construction-beam", type=_positive_int, default=96)
    parser.add_argument("--search-beam", type=_positive_int, default=96)
    parser.add_argument("--target-recall", type=_fraction, default=0.95)
    parser.add_argument(
        "--index-path", help="load the approx index from this file, or save it there"
    )


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scheme", type=_scheme, default=TaggingScheme.BIO)
    parser.add_argument(
        "--threads",
        type=_positive_int,
        default=None,
        help="worker threads (default: KNN_NER_THREADS or all cores; 1 = serial)",
    )


def cmd_build(args) -> int:
    dump = _load_dump(args.train_dump)
    store = build_datastore(dump, timestamp=args.timestamp)
    _atomic_write_bytes(args.out, lambda stream: save_datastore(store, stream))
    stats = datastore_stats(store)
    print(f"datastore written to {args.out}")
    print(f"n={stats.n} entries, m={stats.m} dims, {len(stats.histogram)} labels")
    for label, count in stats.histogram.items():
        print(f"  {label:<12} {count:>8d}  ({stats.frequency[label]:.4f})")
    return EXIT_OK


def cmd_predict(args) -> int:
    store = _load_store(args.datastore)
    dump = _load_dump(args.query_dump)
    index = _resolve_index(args, store)
    hyper = Hyperparams(k=args.k, temperature=args.temperature, lam=args.lam)
    result = predict_tokens(index, dump, hyper, trace=args.trace, threads=args.threads)
    buf = io.StringIO()
    lines = write_prediction_records(result, dump, buf)
    _atomic_write_text(args.out, buf.getvalue())
    print(f"{lines} sentence records written to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    store = _load_store(args.datastore)
    dump = _load_dump(args.dump)
    index = _resolve_index(args, store)
    hyper = Hyperparams(k=args.k, temperature=args.temperature, lam=args.lam)
    outcome = evaluate_dump(index, dump, hyper, scheme=args.scheme, threads=args.threads)
    if hyper.lam == 1.0:
        print("lambda=1.0: pure base-model evaluation, no retrieval influence")
        print(format_metrics(outcome.baseline, title="baseline"))
    else:
        print(format_metrics(outcome.report, title="knn"))
        print()
        print(format_metrics(outcome.baseline, title="baseline"))
        print(f"\nF1 delta over baseline: {outcome.f1_delta:+.4f}")
    if args.out:
        _atomic_write_text(args.out, report_records(outcome))
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    store = _load_store(args.datastore)
    dump = _load_dump(args.dev_dump)
    result = sweep(
        store,
        dump,
        args.k_grid,
        args.lambda_grid,
        args.temperature_grid,
        scheme=args.scheme,
        threads=args.threads,
    )
    _atomic_write_text(args.out_csv, result.to_csv())
    if args.out_json:
        _atomic_write_text(
            args.out_json, json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n"
        )
    best = result.best
    print(f"{len(result.cells)} cells written to {args.out_csv}")
    print(
        f"best cell: k={best.k} lambda={best.lam} T={best.temperature} "
        f"f1={best.report.f1:.4f} (baseline {result.baseline.f1:.4f})"
    )
    return EXIT_OK


def cmd_synth(args) -> int:
    config = SyntheticConfig(
        entity_types=args.entity_types,
        scheme=args.scheme,
        train_sentences=args.train_sentences,
        test_sentences=args.test_sentences,
        mean_sentence_length=args.mean_length,
        dim=args.dim,
        center_scale=args.center_scale,
        cluster_spread=args.spread,
        context_weight=args.context_weight,
        corruption_rate=args.corruption,
        seed=args.seed,
    )
    train, test = gen_synthetic(config)
    _atomic_write_bytes(args.out_train, lambda stream: write_dump(train, stream))
    _atomic_write_bytes(args.out_test, lambda stream: write_dump(test, stream))
    print(
        f"train: {train.sentence_count} sentences / {train.token_count} tokens "
        f"-> {args.out_train}"
    )
    print(
        f"test:  {test.sentence_count} sentences / {test.token_count} tokens "
        f"-> {args.out_test}"
    )
    return EXIT_OK


def cmd_lowres(args) -> int:
    train = _load_dump(args.train_dump)
    test = _load_dump(args.test_dump)
    dev = _load_dump(args.dev_dump) if args.dev_dump else None
    points = low_resource_curve(
        train,
        test,
        args.fractions,
        args.seed,
        k=args.k,
        temperature=args.temperature,
        lam_grid=args.lambda_grid,
        dev_dump=dev,
        scheme=args.scheme,
        threads=args.threads,
    )
    _atomic_write_text(args.out, curve_to_csv(points))
    print(f"{len(points)} curve points written to {args.out}")
    for p in points:
        print(
            f"  fraction={p.fraction:<5g} baseline={p.baseline_f1:.4f} "
            f"knn={p.knn_f1:.4f} (lambda={p.lam})"
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="knn-ner",
        description="Retrieval-augmented NER: datastore building, prediction, evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="build a datastore from a labeled dump")
    p.add_argument("train_dump")
    p.add_argument("out")
    p.add_argument("--timestamp", type=int, default=None)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("predict", help="predict labels for a query dump")
    p.add_argument("datastore")
    p.add_argument("query_dump")
    p.add_argument("out")
    _add_hyper_flags(p)
    _add_index_flags(p)
    _add_common_flags(p)
    p.add_argument("--trace", action="store_true", help="record per-token neighbor traces")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="span-level evaluation of a labeled dump")
    p.add_argument("datastore")
    p.add_argument("dump")
    _add_hyper_flags(p)
    _add_index_flags(p)
    _add_common_flags(p)
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-search k, lambda, and temperature")
    p.add_argument("datastore")
    p.add_argument("dev_dump")
    p.add_argument("--k-grid", type=_int_list, required=True)
    p.add_argument("--lambda-grid", type=_float_list(_unit_float), required=True)
    p.add_argument("--temperature-grid", type=_float_list(_positive_float), required=True)
    p.add_argument("--out-csv", required=True)
    p.add_argument("--out-json")
    _add_common_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth", help="generate the seeded synthetic benchmark")
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.add_argument("--entity-types", type=_positive_int, default=4)
    p.add_argument("--scheme", type=_scheme, default=TaggingScheme.BIO)
    p.add_argument("--train-sentences", type=_positive_int, default=400)
    p.add_argument("--test-sentences", type=_positive_int, default=200)
    p.add_argument("--mean-length", type=_positive_float, default=12.0)
    p.add_argument("--dim", type=_positive_int, default=16)
    p.add_argument("--center-scale", type=_positive_float, default=1.0)
    p.add_argument("--spread", type=_positive_float, default=0.6)
    p.add_argument("--context-weight", type=float, default=0.25)
    p.add_argument("--corruption", type=_unit_float, default=0.0)
    p.add_argument("--seed", type=int, default=90125)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("lowres", help="low-resource curve with the centroid stand-in")
    p.add_argument("train_dump")
    p.add_argument("test_dump")
    p.add_argument("--fractions", type=_float_list(_fraction), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k", type=_positive_int, default=32)
    p.add_argument("--temperature", type=_positive_float, default=1.0)
    p.add_argument(
        "--lambda-grid",
        type=_float_list(_unit_float),
        default=[0.0, 0.25, 0.5, 0.75, 1.0],
    )
    p.add_argument("--dev-dump")
    p.add_argument("--out", required=True)
    _add_common_flags(p)
    p.set_defaults(func=cmd_lowres)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UnlabeledTokenError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MismatchError as exc:
        print(f"mismatch error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (FormatError, EmptyDatastoreError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvalidInputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except KnnNerError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
