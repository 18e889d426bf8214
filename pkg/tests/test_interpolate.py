import io
import json
import math

import numpy as np
import pytest

from knn_ner import (
    Hyperparams,
    LabelDistribution,
    NeighborSet,
    build_datastore,
    interpolate,
    knn_distribution,
    predict_tokens,
)
from knn_ner.dump_io import stack_base_log_probs, stack_embeddings, stack_gold_labels
from knn_ner.errors import (
    DimensionMismatchError,
    EmptyNeighborsError,
    InvalidInputError,
    VocabMismatchError,
)
from knn_ner.interpolate import write_prediction_records
from knn_ner.synthetic import benchmark_with, gen_synthetic

from .conftest import random_dump
from .reference import ref_knn_pipeline


def neighbors(*pairs):
    ds = np.array([d for d, _ in pairs], dtype=np.float64)
    vs = np.array([v for _, v in pairs], dtype=np.int64)
    return NeighborSet(distances=ds, indices=np.arange(len(pairs)), values=vs)


class TestKnnDistribution:
    def test_two_equidistant_labels_split_evenly(self):
        for temperature in (0.1, 1.0, 42.0):
            dist = knn_distribution(neighbors((0.0, 1), (0.0, 2)), temperature, 4)
            np.testing.assert_array_equal(dist.probs, [0.0, 0.5, 0.5, 0.0])

    def test_equal_weights_count_multiplicity(self):
        dist = knn_distribution(neighbors((0.0, 1), (0.0, 1), (0.0, 2)), 3.0, 3)
        np.testing.assert_allclose(dist.probs, [0.0, 2 / 3, 1 / 3], atol=1e-15)

    def test_hand_computed_two_neighbor_case(self):
        # weights exp(-1/2), exp(-3/2); p(A) = 1 / (1 + e^-1)
        dist = knn_distribution(neighbors((1.0, 0), (3.0, 1)), 2.0, 2)
        expect_a = 1.0 / (1.0 + math.exp(-1.0))
        assert dist.probs[0] == pytest.approx(expect_a, abs=1e-12)
        assert dist.probs[1] == pytest.approx(1.0 - expect_a, abs=1e-12)
        assert expect_a == pytest.approx(0.7310585786300049, abs=1e-15)

    def test_absent_labels_get_exact_zero(self, rng):
        for _ in range(40):
            count = int(rng.integers(1, 12))
            ds = np.sort(rng.random(count) * 5)
            vs = rng.integers(0, 3, count)
            dist = knn_distribution(
                NeighborSet(ds, np.arange(count), vs), float(rng.random() + 0.1), 6
            )
            support = set(vs.tolist())
            for label in range(6):
                if label not in support:
                    assert dist.probs[label] == 0.0
            assert abs(dist.probs.sum() - 1.0) <= 1e-9

    def test_shift_invariance(self, rng):
        ds = np.sort(rng.random(8) * 3)
        vs = rng.integers(0, 4, 8)
        base = knn_distribution(NeighborSet(ds, np.arange(8), vs), 0.7, 5)
        shifted = knn_distribution(NeighborSet(ds + 123.0, np.arange(8), vs), 0.7, 5)
        np.testing.assert_allclose(base.probs, shifted.probs, atol=1e-12)

    def test_temperature_limits(self, rng):
        ds = np.sort(rng.random(16) * 2 + 0.5)
        ds[0] = 0.1  # ensure a unique nearest
        vs = rng.integers(0, 4, 16)
        flat = knn_distribution(NeighborSet(ds, np.arange(16), vs), 1e9, 5)
        counts = np.bincount(vs, minlength=5) / 16
        np.testing.assert_allclose(flat.probs, counts, atol=1e-6)
        sharp = knn_distribution(NeighborSet(ds, np.arange(16), vs), 1e-9, 5)
        assert sharp.probs[vs[0]] >= 1 - 1e-6

    def test_closer_neighbor_wins_for_any_finite_temperature(self):
        for temperature in (1e-3, 0.5, 1.0, 100.0, 1e6):
            dist = knn_distribution(neighbors((0.5, 0), (0.9, 1)), temperature, 2)
            assert dist.probs[0] > dist.probs[1]

    def test_empty_neighbors_rejected(self):
        empty = NeighborSet(np.empty(0), np.empty(0, int), np.empty(0, int))
        with pytest.raises(EmptyNeighborsError):
            knn_distribution(empty, 1.0, 3)

    def test_bad_temperature(self):
        with pytest.raises(InvalidInputError):
            knn_distribution(neighbors((0.0, 0)), 0.0, 2)


class TestInterpolate:
    def p(self, *vals):
        return LabelDistribution(np.array(vals))

    def test_lambda_one_is_pure_base(self):
        base, knn = self.p(0.8, 0.2), self.p(0.2, 0.8)
        np.testing.assert_array_equal(interpolate(base, knn, 1.0).probs, base.probs)

    def test_lambda_zero_is_pure_knn(self):
        base, knn = self.p(0.8, 0.2), self.p(0.2, 0.8)
        np.testing.assert_array_equal(interpolate(base, knn, 0.0).probs, knn.probs)

    def test_midpoint(self):
        out = interpolate(self.p(0.8, 0.2), self.p(0.2, 0.8), 0.5)
        np.testing.assert_allclose(out.probs, [0.5, 0.5], atol=1e-15)

    @pytest.mark.parametrize("lam", [0.0, 0.25, 0.5, 0.75, 1.0])
    def test_affine_identity(self, rng, lam):
        a = rng.random(6)
        b = rng.random(6)
        base, knn = self.p(*(a / a.sum())), self.p(*(b / b.sum()))
        out = interpolate(base, knn, lam)
        np.testing.assert_array_equal(
            out.probs, lam * base.probs + (1 - lam) * knn.probs
        )

    def test_size_mismatch(self):
        with pytest.raises(VocabMismatchError):
            interpolate(self.p(1.0), self.p(0.5, 0.5), 0.5)

    def test_bad_lambda(self):
        with pytest.raises(InvalidInputError):
            interpolate(self.p(1.0), self.p(1.0), 1.5)


class TestPredictTokens:
    def test_lambda_one_equals_base_argmax(self, rng):
        dump = random_dump(rng, sentence_count=6)
        store = build_datastore(random_dump(rng, sentence_count=6))
        result = predict_tokens(store, dump, Hyperparams(k=3, temperature=1.0, lam=1.0))
        base = stack_base_log_probs(dump).astype(np.float64)
        expected = np.argmax(base, axis=1)
        got = np.concatenate(result.sentences)
        np.testing.assert_array_equal(got, expected)

    def test_self_datastore_k1_lambda0_returns_gold(self, rng):
        dump = random_dump(rng, sentence_count=10)
        store = build_datastore(dump)
        result = predict_tokens(store, dump, Hyperparams(k=1, temperature=1.0, lam=0.0))
        np.testing.assert_array_equal(
            np.concatenate(result.sentences), stack_gold_labels(dump).astype(np.int64)
        )

    def test_matches_direct_formula_recomputation(self, rng):
        cfg = benchmark_with(train_sentences=25, test_sentences=10, corruption_rate=0.3)
        train, test = gen_synthetic(cfg)
        store = build_datastore(train)
        hyper = Hyperparams(k=32, temperature=1.0, lam=0.5)
        result = predict_tokens(store, test, hyper, trace=True)
        expected = ref_knn_pipeline(
            store.keys64,
            store.values,
            stack_embeddings(test).astype(np.float64),
            stack_base_log_probs(test),
            hyper.k,
            hyper.temperature,
            hyper.lam,
        )
        flat_traces = [t for sent in result.traces for t in sent]
        got = np.stack([t.p_final.probs for t in flat_traces])
        np.testing.assert_allclose(got, expected, atol=1e-9)
        np.testing.assert_array_equal(
            np.concatenate(result.sentences), np.argmax(expected, axis=1)
        )

    def test_argmax_tie_breaks_to_lowest_label_id(self):
        # Two labels with exactly equal final mass: argmax must pick the lower id.
        p = np.array([0.5, 0.5])
        assert int(np.argmax(p)) == 0

    def test_k_clamped_to_datastore_size(self, rng):
        dump = random_dump(rng, sentence_count=2)
        store = build_datastore(random_dump(rng, sentence_count=1, max_len=2))
        result = predict_tokens(store, dump, Hyperparams(k=500, temperature=1.0, lam=0.5), trace=True)
        assert all(len(t.neighbors) == store.n for sent in result.traces for t in sent)

    def test_vocab_mismatch_rejected(self, rng):
        from knn_ner import LabelVocab

        dump = random_dump(rng, vocab=LabelVocab(["O", "B-A", "I-A"]), sentence_count=2)
        store = build_datastore(random_dump(rng, sentence_count=2))
        with pytest.raises(VocabMismatchError):
            predict_tokens(store, dump, Hyperparams())

    def test_dim_mismatch_rejected(self, rng):
        dump = random_dump(rng, dim=5, sentence_count=2)
        store = build_datastore(random_dump(rng, dim=4, sentence_count=2))
        with pytest.raises(DimensionMismatchError):
            predict_tokens(store, dump, Hyperparams())

    def test_trace_distributions_normalize(self, rng):
        dump = random_dump(rng, sentence_count=3)
        store = build_datastore(random_dump(rng, sentence_count=4))
        result = predict_tokens(store, dump, Hyperparams(k=4, temperature=0.5, lam=0.3), trace=True)
        for sent in result.traces:
            for t in sent:
                for dist in (t.p_base, t.p_knn, t.p_final):
                    assert abs(dist.probs.sum() - 1.0) <= 1e-9
                assert t.label_id == int(np.argmax(t.p_final.probs))

    def test_output_order_independent_of_threads(self, rng):
        dump = random_dump(rng, sentence_count=12)
        store = build_datastore(random_dump(rng, sentence_count=12))
        hyper = Hyperparams(k=5, temperature=1.0, lam=0.4)
        serial = predict_tokens(store, dump, hyper, threads=1)
        threaded = predict_tokens(store, dump, hyper, threads=4)
        for a, b in zip(serial.sentences, threaded.sentences):
            np.testing.assert_array_equal(a, b)


class TestPredictionRecords:
    def test_jsonl_schema(self, rng):
        dump = random_dump(rng, sentence_count=3)
        store = build_datastore(random_dump(rng, sentence_count=3))
        result = predict_tokens(store, dump, Hyperparams(k=4, temperature=1.0, lam=0.5), trace=True)
        buf = io.StringIO()
        count = write_prediction_records(result, dump, buf)
        lines = buf.getvalue().strip().split("\n")
        assert count == len(lines) == 3
        for s_idx, line in enumerate(lines):
            record = json.loads(line)
            assert record["sentence_index"] == s_idx
            assert len(record["predicted"]) == len(record["words"])
            assert len(record["trace"]) == len(record["words"])
            for token in record["trace"]:
                dists = token["neighbor_distances"]
                assert dists == sorted(dists)
                assert len(dists) == 4
                assert len(token["p_knn"]) == dump.vocab.size

    def test_gold_null_when_unlabeled(self, rng):
        dump = random_dump(rng, sentence_count=2, unlabeled_rate=1.0)
        store = build_datastore(random_dump(rng, sentence_count=2))
        result = predict_tokens(store, dump, Hyperparams(k=2, temperature=1.0, lam=0.5))
        buf = io.StringIO()
        write_prediction_records(result, dump, buf)
        for line in buf.getvalue().strip().split("\n"):
            assert json.loads(line)["gold"] is None
