"""Span-level scoring and the experiment harnesses built on top of it.

A predicted span counts iff its (type, start, end) exactly equals a gold
span of the same sentence; precision/recall/F1 are micro-averaged over the
corpus (span counts pooled), with per-type breakdowns alongside.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from itertools import product
from typing import AbstractSet, Iterable, Sequence

import numpy as np

from .core import EntitySpan, Hyperparams, TaggingScheme, extract_spans
from .datastore import build_datastore
from .dump_io import (
    UNLABELED,
    EmbeddingDump,
    sentence_lengths,
    stack_embeddings,
    subsample_dump,
)
from .engine import backing_store, batch_retrieve
from .errors import InvalidInputError, UnlabeledTokenError
from .interpolate import knn_probs_batch, predict_tokens, renormalized_base
from .synthetic import apply_centroid_model, fit_centroid_baseline


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean; 0 when both terms vanish."""
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class TypeMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass(frozen=True)
class SpanCounts:
    gold: int
    predicted: int
    matched: int


@dataclass(frozen=True)
class MetricsReport:
    precision: float
    recall: float
    f1: float
    per_type: dict[str, TypeMetrics]
    counts: SpanCounts

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_type": {
                t: {
                    "precision": m.precision,
                    "recall": m.recall,
                    "f1": m.f1,
                    "support": m.support,
                }
                for t, m in self.per_type.items()
            },
            "counts": {
                "gold": self.counts.gold,
                "predicted": self.counts.predicted,
                "matched": self.counts.matched,
            },
        }


def format_metrics(report: MetricsReport, title: str = "overall") -> str:
    """Fixed-width human-readable table."""
    lines = [
        f"{'type':<12} {'precision':>9} {'recall':>9} {'f1':>9} {'support':>8}",
        f"{title:<12} {report.precision:>9.4f} {report.recall:>9.4f} "
        f"{report.f1:>9.4f} {report.counts.gold:>8d}",
    ]
    for etype in sorted(report.per_type):
        m = report.per_type[etype]
        lines.append(
            f"{etype:<12} {m.precision:>9.4f} {m.recall:>9.4f} {m.f1:>9.4f} {m.support:>8d}"
        )
    return "\n".join(lines)


def span_prf(
    gold: Sequence[AbstractSet[EntitySpan]],
    predicted: Sequence[AbstractSet[EntitySpan]],
) -> MetricsReport:
    """Micro-averaged exact-match precision/recall/F1 over sentence span sets."""
    if len(gold) != len(predicted):
        raise InvalidInputError(
            f"gold has {len(gold)} sentences, predictions have {len(predicted)}"
        )
    total_gold = total_pred = total_match = 0
    by_type: dict[str, list[int]] = {}  # type -> [gold, predicted, matched]
    for gold_spans, pred_spans in zip(gold, predicted):
        matched = gold_spans & pred_spans
        total_gold += len(gold_spans)
        total_pred += len(pred_spans)
        total_match += len(matched)
        for span in gold_spans:
            by_type.setdefault(span.entity_type, [0, 0, 0])[0] += 1
        for span in pred_spans:
            by_type.setdefault(span.entity_type, [0, 0, 0])[1] += 1
        for span in matched:
            by_type[span.entity_type][2] += 1

    def prf(g: int, p: int, m: int) -> tuple[float, float, float]:
        precision = m / p if p else 0.0
        recall = m / g if g else 0.0
        return precision, recall, f1_score(precision, recall)

    precision, recall, f1 = prf(total_gold, total_pred, total_match)
    per_type = {}
    for etype in sorted(by_type):
        g, p, m = by_type[etype]
        tp, tr, tf = prf(g, p, m)
        per_type[etype] = TypeMetrics(precision=tp, recall=tr, f1=tf, support=g)
    return MetricsReport(
        precision=precision,
        recall=recall,
        f1=f1,
        per_type=per_type,
        counts=SpanCounts(gold=total_gold, predicted=total_pred, matched=total_match),
    )


def _require_labeled(dump: EmbeddingDump) -> None:
    for s_idx, sent in enumerate(dump.sentences):
        unlabeled = sent.gold_labels == UNLABELED
        if unlabeled.any():
            raise UnlabeledTokenError(s_idx, int(np.argmax(unlabeled)))


def gold_span_sets(
    dump: EmbeddingDump, scheme: TaggingScheme = TaggingScheme.BIO
) -> list[set[EntitySpan]]:
    _require_labeled(dump)
    return [
        extract_spans(dump.vocab.tags_of(sent.gold_labels), scheme)
        for sent in dump.sentences
    ]


def _span_sets_from_ids(
    dump: EmbeddingDump, per_sentence_ids: Iterable[np.ndarray], scheme: TaggingScheme
) -> list[set[EntitySpan]]:
    return [
        extract_spans(dump.vocab.tags_of(ids), scheme) for ids in per_sentence_ids
    ]


def baseline_predictions(dump: EmbeddingDump) -> list[np.ndarray]:
    """Per-sentence argmax of the stored base distributions (the lam=1 path)."""
    probs = renormalized_base(dump)
    chosen = np.argmax(probs, axis=1).astype(np.int64)
    lengths = sentence_lengths(dump)
    offsets = np.cumsum([0] + lengths)
    return [chosen[offsets[i] : offsets[i + 1]] for i in range(len(lengths))]


@dataclass(frozen=True)
class EvalOutcome:
    """kNN-interpolated report plus the base model's own report."""

    report: MetricsReport
    baseline: MetricsReport
    hyper: Hyperparams

    @property
    def f1_delta(self) -> float:
        return self.report.f1 - self.baseline.f1

    def to_dict(self) -> dict:
        return {
            "hyper": {
                "k": self.hyper.k,
                "temperature": self.hyper.temperature,
                "lambda": self.hyper.lam,
            },
            "report": self.report.to_dict(),
            "baseline": self.baseline.to_dict(),
            "f1_delta": self.f1_delta,
        }


def evaluate_dump(
    store_or_index,
    dump: EmbeddingDump,
    hyper: Hyperparams,
    *,
    scheme: TaggingScheme = TaggingScheme.BIO,
    threads: int | None = None,
) -> EvalOutcome:
    """predict -> tags -> spans -> span_prf, with the lam=1 baseline alongside."""
    gold = gold_span_sets(dump, scheme)
    result = predict_tokens(store_or_index, dump, hyper, threads=threads)
    predicted = _span_sets_from_ids(dump, result.sentences, scheme)
    baseline = _span_sets_from_ids(dump, baseline_predictions(dump), scheme)
    return EvalOutcome(
        report=span_prf(gold, predicted),
        baseline=span_prf(gold, baseline),
        hyper=hyper,
    )


@dataclass(frozen=True)
class SweepCell:
    k: int
    lam: float
    temperature: float
    report: MetricsReport


@dataclass(frozen=True)
class SweepResult:
    """All grid cells in (k, lambda, T) product order plus the winning cell."""

    cells: tuple[SweepCell, ...]
    best: SweepCell
    baseline: MetricsReport

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["k", "lambda", "T", "precision", "recall", "f1"])
        for cell in self.cells:
            writer.writerow(
                [
                    cell.k,
                    cell.lam,
                    cell.temperature,
                    f"{cell.report.precision:.6f}",
                    f"{cell.report.recall:.6f}",
                    f"{cell.report.f1:.6f}",
                ]
            )
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "cells": [
                {
                    "k": c.k,
                    "lambda": c.lam,
                    "T": c.temperature,
                    "report": c.report.to_dict(),
                }
                for c in self.cells
            ],
            "best": {"k": self.best.k, "lambda": self.best.lam, "T": self.best.temperature},
            "baseline": self.baseline.to_dict(),
        }


def _validate_grids(k_grid, lam_grid, t_grid) -> tuple[list[int], list[float], list[float]]:
    ks = [int(k) for k in k_grid]
    lams = [float(x) for x in lam_grid]
    ts = [float(t) for t in t_grid]
    if not ks or not lams or not ts:
        raise InvalidInputError("all three grids must be non-empty")
    for k in ks:
        if k < 1:
            raise InvalidInputError(f"grid k must be >= 1, got {k}")
    for lam in lams:
        if not 0.0 <= lam <= 1.0:
            raise InvalidInputError(f"grid lambda must lie in [0, 1], got {lam}")
    for t in ts:
        if not t > 0:
            raise InvalidInputError(f"grid temperature must be > 0, got {t}")
    return ks, lams, ts


def sweep(
    store_or_index,
    dev_dump: EmbeddingDump,
    k_grid: Sequence[int],
    lam_grid: Sequence[float],
    t_grid: Sequence[float],
    *,
    scheme: TaggingScheme = TaggingScheme.BIO,
    threads: int | None = None,
) -> SweepResult:
    """Evaluate every (k, lambda, T) cell on the dev dump.

    Retrieval runs once at max(k_grid); because results are sorted with a
    deterministic tie rule, the top-k list for any smaller k is a prefix of
    the max-k list, so every cell sees exactly what a direct evaluation
    would. Best cell = max F1, ties to larger lambda, then smaller k and T.
    """
    ks, lams, ts = _validate_grids(k_grid, lam_grid, t_grid)
    store = backing_store(store_or_index)
    gold = gold_span_sets(dev_dump, scheme)
    lengths = sentence_lengths(dev_dump)
    offsets = np.cumsum([0] + lengths)

    queries = stack_embeddings(dev_dump).astype(np.float64)
    dists, indices = batch_retrieve(store_or_index, queries, max(ks), threads=threads)
    labels = store.values[indices].astype(np.int64)
    p_base = renormalized_base(dev_dump)

    def report_from(p_final: np.ndarray) -> MetricsReport:
        chosen = np.argmax(p_final, axis=1).astype(np.int64)
        per_sentence = [
            chosen[offsets[i] : offsets[i + 1]] for i in range(len(lengths))
        ]
        return span_prf(gold, _span_sets_from_ids(dev_dump, per_sentence, scheme))

    baseline = report_from(p_base)
    table: dict[tuple[int, float, float], MetricsReport] = {}
    for k in ks:
        j = min(k, store.n)
        d_k = dists[:, :j]
        l_k = labels[:, :j]
        for t in ts:
            p_knn = knn_probs_batch(d_k, l_k, t, store.vocab.size)
            for lam in lams:
                table[(k, lam, t)] = report_from(lam * p_base + (1.0 - lam) * p_knn)

    cells = tuple(
        SweepCell(k=k, lam=lam, temperature=t, report=table[(k, lam, t)])
        for k, lam, t in product(ks, lams, ts)
    )
    best = max(cells, key=lambda c: (c.report.f1, c.lam, -c.k, -c.temperature))
    return SweepResult(cells=cells, best=best, baseline=baseline)


@dataclass(frozen=True)
class LowResourcePoint:
    fraction: float
    baseline_f1: float
    knn_f1: float
    lam: float


def low_resource_curve(
    train_dump: EmbeddingDump,
    test_dump: EmbeddingDump,
    fractions: Sequence[float],
    seed: int,
    *,
    k: int = 32,
    temperature: float = 1.0,
    lam_grid: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    dev_dump: EmbeddingDump | None = None,
    scheme: TaggingScheme = TaggingScheme.BIO,
    threads: int | None = None,
) -> list[LowResourcePoint]:
    """Refit the stand-in base model on each train fraction, keep the full
    datastore, and report baseline vs tuned-lambda kNN F1 per fraction.

    Lambda is tuned over lam_grid on dev_dump when given, otherwise on the
    test dump itself (qualitative harness; ties prefer larger lambda).
    Fully deterministic for a fixed seed.
    """
    if not fractions:
        raise InvalidInputError("need at least one fraction")
    for fraction in fractions:
        if not 0.0 < fraction <= 1.0:
            raise InvalidInputError(f"fraction must lie in (0, 1], got {fraction!r}")
    _require_labeled(train_dump)
    _require_labeled(test_dump)
    store = build_datastore(train_dump)

    tune_on_test = dev_dump is None
    points = []
    for fraction in fractions:
        sub = subsample_dump(train_dump, fraction, seed)
        model = fit_centroid_baseline(sub)
        test_refit = apply_centroid_model(model, test_dump)
        tune_refit = test_refit if tune_on_test else apply_centroid_model(model, dev_dump)

        tune_sweep = sweep(
            store, tune_refit, [k], lam_grid, [temperature], scheme=scheme, threads=threads
        )
        best_lam = tune_sweep.best.lam
        outcome = evaluate_dump(
            store,
            test_refit,
            Hyperparams(k=k, temperature=temperature, lam=best_lam),
            scheme=scheme,
            threads=threads,
        )
        points.append(
            LowResourcePoint(
                fraction=float(fraction),
                baseline_f1=outcome.baseline.f1,
                knn_f1=outcome.report.f1,
                lam=best_lam,
            )
        )
    return points


def curve_to_csv(points: Sequence[LowResourcePoint]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fraction", "baseline_f1", "knn_f1", "lambda"])
    for p in points:
        writer.writerow([p.fraction, f"{p.baseline_f1:.6f}", f"{p.knn_f1:.6f}", p.lam])
    return buf.getvalue()


def report_records(outcome: EvalOutcome) -> str:
    """Machine-readable evaluation output: one JSON record per line."""
    return json.dumps(outcome.to_dict(), sort_keys=True) + "\n"
