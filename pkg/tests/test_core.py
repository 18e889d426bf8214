import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knn_ner import (
    EntitySpan,
    Hyperparams,
    LabelDistribution,
    LabelVocab,
    Sentence,
    TaggingScheme,
    extract_spans,
    render_spans,
    stable_softmax,
)
from knn_ner.errors import InvalidInputError

from .reference import ref_bio_spans, ref_softmax

BIO = TaggingScheme.BIO
BMES = TaggingScheme.BMES
IO = TaggingScheme.IO


def spans(*triples):
    return {EntitySpan(t, s, e) for t, s, e in triples}


class TestStableSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(stable_softmax([0.0, 0.0]).probs, [0.5, 0.5])

    def test_huge_logits_stay_finite(self):
        out = stable_softmax([1000.0, 1000.0, 1000.0]).probs
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-12)

    def test_hand_computed_ratio(self):
        # exp(ln 3) : exp(ln 1) = 3 : 1
        out = stable_softmax([math.log(3), math.log(1)]).probs
        np.testing.assert_allclose(out, [0.75, 0.25], atol=1e-15)

    def test_sums_to_one_tightly(self, rng):
        for _ in range(50):
            logits = rng.normal(0, 10, int(rng.integers(1, 30)))
            assert abs(stable_softmax(logits).probs.sum() - 1.0) <= 1e-12

    def test_matches_scalar_reference(self, rng):
        logits = rng.normal(0, 5, 12)
        np.testing.assert_allclose(
            stable_softmax(logits).probs, ref_softmax(list(logits)), atol=1e-14
        )

    @given(
        st.lists(st.floats(-50, 50), min_size=1, max_size=12),
        st.floats(-1e6, 1e6),
    )
    def test_shift_invariance(self, logits, shift):
        base = stable_softmax(logits).probs
        shifted = stable_softmax([x + shift for x in logits]).probs
        np.testing.assert_allclose(base, shifted, atol=1e-12)

    @pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf, 1.0], [-np.inf]])
    def test_rejects_non_finite(self, bad):
        with pytest.raises(InvalidInputError):
            stable_softmax(bad)

    def test_rejects_empty(self):
        with pytest.raises(InvalidInputError):
            stable_softmax([])


class TestExtractSpansBIO:
    def test_textbook(self):
        got = extract_spans(["B-PER", "I-PER", "O", "B-LOC"], BIO)
        assert got == spans(("PER", 0, 1), ("LOC", 3, 3))

    def test_all_outside(self):
        assert extract_spans(["O", "O", "O"], BIO) == set()

    def test_lenient_repair_of_dangling_continuation(self):
        got = extract_spans(["I-PER", "I-PER", "B-PER"], BIO)
        assert got == spans(("PER", 0, 1), ("PER", 2, 2))
        as_tuples = {(s.entity_type, s.start, s.end) for s in got}
        assert as_tuples == ref_bio_spans(["I-PER", "I-PER", "B-PER"])

    def test_type_switch_inside_continuation(self):
        got = extract_spans(["B-PER", "I-LOC", "I-LOC"], BIO)
        assert got == spans(("PER", 0, 0), ("LOC", 1, 2))

    def test_adjacent_spans_via_b(self):
        got = extract_spans(["B-PER", "B-PER", "I-PER"], BIO)
        assert got == spans(("PER", 0, 0), ("PER", 1, 2))

    def test_unknown_tag_rejected(self):
        with pytest.raises(InvalidInputError):
            extract_spans(["B-PER", "X-PER"], BIO)
        with pytest.raises(InvalidInputError):
            extract_spans(["B-"], BIO)

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            extract_spans([], BIO)

    def test_exhaustive_short_sequences_match_reference(self):
        alphabet = ["O", "B-A", "I-A", "B-B", "I-B"]

        def legal(seq):
            prev = "O"
            for tag in seq:
                if tag.startswith("I-") and prev not in (
                    "B-" + tag[2:],
                    "I-" + tag[2:],
                ):
                    return False
                prev = tag
            return True

        checked = 0
        for length in range(1, 6):
            for seq in itertools.product(alphabet, repeat=length):
                if not legal(seq):
                    continue
                got = {(s.entity_type, s.start, s.end) for s in extract_spans(seq, BIO)}
                assert got == ref_bio_spans(list(seq)), seq
                checked += 1
        assert checked > 500

    def test_enumerated_three_token_lenient_sequences(self):
        # The reference extractor also implements the lenient rule, so
        # every 3-token sequence (legal or not) must agree.
        alphabet = ["O", "B-A", "I-A", "B-B", "I-B"]
        for seq in itertools.product(alphabet, repeat=3):
            got = {(s.entity_type, s.start, s.end) for s in extract_spans(seq, BIO)}
            assert got == ref_bio_spans(list(seq)), seq


class TestExtractSpansBMES:
    def test_basic(self):
        got = extract_spans(["B-PER", "M-PER", "E-PER", "O", "S-LOC"], BMES)
        assert got == spans(("PER", 0, 2), ("LOC", 4, 4))

    def test_lenient_unterminated_span_closes_at_boundary(self):
        assert extract_spans(["B-PER", "M-PER", "O"], BMES) == spans(("PER", 0, 1))
        assert extract_spans(["B-PER", "M-PER"], BMES) == spans(("PER", 0, 1))

    def test_lenient_dangling_end_is_single(self):
        assert extract_spans(["O", "E-PER"], BMES) == spans(("PER", 1, 1))

    def test_adjacent_singles(self):
        got = extract_spans(["S-PER", "S-PER"], BMES)
        assert got == spans(("PER", 0, 0), ("PER", 1, 1))


class TestExtractSpansIO:
    def test_runs_merge(self):
        got = extract_spans(["PER", "PER", "O", "LOC"], IO)
        assert got == spans(("PER", 0, 1), ("LOC", 3, 3))

    def test_type_switch_splits(self):
        got = extract_spans(["PER", "LOC"], IO)
        assert got == spans(("PER", 0, 0), ("LOC", 1, 1))

    def test_prefixed_tag_rejected_under_io(self):
        with pytest.raises(InvalidInputError):
            extract_spans(["I-PER"], IO)


@pytest.mark.parametrize("scheme", [BIO, BMES, IO])
class TestRenderRoundTrip:
    @given(data=st.data())
    @settings(max_examples=60, deadline=None)
    def test_extract_is_fixed_point(self, scheme, data):
        length = data.draw(st.integers(1, 8))
        # Build random non-overlapping spans, render, then check stability.
        span_set = set()
        cursor = 0
        while cursor < length:
            if data.draw(st.booleans()):
                end = data.draw(st.integers(cursor, min(length - 1, cursor + 2)))
                etype = data.draw(st.sampled_from(["A", "B"]))
                span_set.add(EntitySpan(etype, cursor, end))
                cursor = end + 1
            else:
                cursor += 1
        tags = render_spans(span_set, length, scheme)
        extracted = extract_spans(tags, scheme)
        rerendered = render_spans(extracted, length, scheme)
        assert rerendered == tags
        assert extract_spans(rerendered, scheme) == extracted
        if scheme is not IO:
            # IO merges adjacent same-type spans by construction.
            assert extracted == span_set


class TestRenderSpans:
    def test_overlap_rejected(self):
        with pytest.raises(InvalidInputError):
            render_spans({EntitySpan("A", 0, 1), EntitySpan("B", 1, 2)}, 3)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(InvalidInputError):
            render_spans({EntitySpan("A", 0, 5)}, 3)


class TestLabelVocab:
    def test_bijection(self):
        vocab = LabelVocab(["O", "B-PER", "I-PER"])
        assert vocab.size == 3
        for i, label in enumerate(vocab.labels):
            assert vocab.id_of(label) == i
            assert vocab.label_of(i) == label

    def test_requires_exactly_one_outside(self):
        with pytest.raises(InvalidInputError):
            LabelVocab(["B-PER", "I-PER"])
        with pytest.raises(InvalidInputError):
            LabelVocab(["O", "O", "B-PER"])

    def test_rejects_duplicates(self):
        with pytest.raises(InvalidInputError):
            LabelVocab(["O", "B-PER", "B-PER"])

    def test_unknown_lookups(self):
        vocab = LabelVocab(["O", "B-PER"])
        with pytest.raises(InvalidInputError):
            vocab.id_of("B-LOC")
        with pytest.raises(InvalidInputError):
            vocab.label_of(17)


class TestSentence:
    def test_gold_length_must_match(self):
        with pytest.raises(InvalidInputError):
            Sentence(words=("a", "b"), gold=(0,))

    def test_empty_rejected(self):
        with pytest.raises(InvalidInputError):
            Sentence(words=())


class TestLabelDistribution:
    def test_linear_validation(self):
        LabelDistribution(np.array([0.25, 0.75]))
        with pytest.raises(InvalidInputError):
            LabelDistribution(np.array([0.5, 0.6]))
        with pytest.raises(InvalidInputError):
            LabelDistribution(np.array([-0.1, 1.1]))

    def test_log_space_validation(self):
        LabelDistribution(np.log([0.25, 0.75]), log_space=True)
        with pytest.raises(InvalidInputError):
            LabelDistribution(np.log([0.3, 0.3]), log_space=True)

    def test_to_linear(self):
        dist = LabelDistribution(np.log([0.25, 0.75]), log_space=True).to_linear()
        np.testing.assert_allclose(dist.probs, [0.25, 0.75], atol=1e-12)


class TestHyperparams:
    def test_defaults_valid(self):
        h = Hyperparams()
        assert h.k == 256 and h.temperature == 1.0 and h.lam == 0.5

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"k": 0},
            {"k": -3},
            {"temperature": 0.0},
            {"temperature": -1.0},
            {"lam": -0.01},
            {"lam": 1.01},
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(InvalidInputError):
            Hyperparams(**kwargs)
