"""
Tests for classification, voting fusion and evaluation.
"""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flowhmm.classify import (
    ClassifierBank,
    Prediction,
    classify,
    classify_all,
    evaluate,
    fuse,
    prediction_from_scores,
    sample_ratio,
    vote,
)
from flowhmm.exceptions import DataError, ShapeError
from flowhmm.gmm import GmmEmission
from flowhmm.hmm import HmmModel, MarkovChain
from flowhmm.numerics import derive_rng
from flowhmm.synth import sample_hmm


def _shifted_model(label, offset, dim=2):
    emission = GmmEmission(
        np.zeros((2, 1)), np.full((2, 1, dim), float(offset)), np.zeros((2, 1, dim))
    )
    return HmmModel(MarkovChain.left_to_right(2), emission, label=label)


@pytest.fixture
def bank():
    return ClassifierBank.from_models(
        [_shifted_model("low", -4), _shifted_model("mid", 0), _shifted_model("high", 4)]
    )


class TestClassify:
    """Test maximum-likelihood decisions."""

    def test_single_class(self):
        """Test that a one-model bank always predicts its class."""
        single = ClassifierBank.from_models([_shifted_model("only", 0)])
        assert classify(single, np.ones((4, 2)) * 9).label == "only"

    def test_identical_models_tie(self):
        """Test that identical models are flagged as a tie and class 0 wins."""
        twins = ClassifierBank([_shifted_model("a", 0), _shifted_model("b", 0)], ["a", "b"])
        prediction = classify(twins, np.zeros((3, 2)))
        assert prediction.tie
        assert prediction.label == "a"

    def test_well_separated_classes(self, bank):
        """Test accuracy on sequences sampled from the class models themselves."""
        rng = derive_rng(0)
        utterances, truth = [], []
        for n in range(60):
            model = bank.models[n % 3]
            utterances.append((f"u{n}", sample_hmm(model, 10, rng)[0]))
            truth.append(model.label)
        predictions = classify_all(bank, utterances)
        accuracy = np.mean([p.label == t for p, t in zip(predictions, truth)])
        assert accuracy >= 0.95

    def test_parallel_order(self, bank):
        """Test that threaded classification keeps input order."""
        rng = derive_rng(1)
        utterances = [(f"u{n}", rng.standard_normal((5, 2)) * 4) for n in range(12)]
        serial = classify_all(bank, utterances)
        parallel = classify_all(bank, utterances, jobs=4)
        assert [p.utterance_id for p in parallel] == [u for u, _ in utterances]
        assert [p.label for p in parallel] == [p.label for p in serial]

    def test_scores_recorded(self, bank):
        """Test that a prediction keeps one score per class."""
        prediction = classify(bank, np.full((3, 2), 4.0), "x")
        assert prediction.scores.shape == (3,)
        assert prediction.label == "high"
        assert prediction.utterance_id == "x"

    @given(st.floats(min_value=-1e3, max_value=1e3, allow_nan=False))
    def test_argmax_is_shift_invariant(self, shift):
        """Test that adding a constant to every score keeps the decision."""
        scores = np.array([-3.0, 1.5, 0.25])
        labels = ["a", "b", "c"]
        assert prediction_from_scores(scores + shift, labels).label == "b"

    def test_score_count_mismatch(self):
        """Test that scores must match the class list."""
        with pytest.raises(ShapeError):
            prediction_from_scores([1.0, 2.0], ["a", "b", "c"])

    def test_bank_validation(self):
        """Test rejection of duplicate labels and empty banks."""
        with pytest.raises(DataError):
            ClassifierBank([_shifted_model("a", 0), _shifted_model("a", 1)], ["a", "a"])
        with pytest.raises(DataError):
            ClassifierBank([], [])

    def test_bank_dimension_mismatch(self):
        """Test that class models must share a feature dimension."""
        with pytest.raises(ShapeError):
            ClassifierBank.from_models([_shifted_model("a", 0, 2), _shifted_model("b", 0, 3)])


class TestVote:
    """Test majority voting."""

    @pytest.mark.parametrize(
        "labels,expected",
        [(["a", "a", "a"], "a"), (["a", "a", "b"], "a"), (["b", "a", "b"], "b")],
    )
    def test_majority(self, labels, expected):
        """Test unanimity and two-of-three majorities."""
        assert vote(labels, derive_rng(2)) == expected

    def test_disagreement_is_uniform(self):
        """Test that three different labels are each chosen about a third of the time."""
        rng = derive_rng(3)
        draws = [vote(["a", "b", "c"], rng) for _ in range(10000)]
        for label in "abc":
            assert abs(draws.count(label) / len(draws) - 1 / 3) < 0.02

    @given(st.lists(st.sampled_from("abcd"), min_size=2, max_size=7))
    def test_strict_majority_always_wins(self, labels):
        """Test that a label holding more than half of the votes is returned."""
        counts = {label: labels.count(label) for label in labels}
        leader = max(counts, key=counts.get)
        if counts[leader] * 2 > len(labels):
            assert vote(labels, derive_rng(4)) == leader
        else:
            assert vote(labels, derive_rng(4)) in counts

    def test_needs_two_voters(self):
        """Test that a single decision cannot be fused."""
        with pytest.raises(DataError):
            vote(["a"], derive_rng(5))


class TestFuse:
    """Test utterance-aligned fusion."""

    def test_fuses_row_by_row(self):
        """Test voting per utterance."""
        sets = [
            [Prediction("u1", "a"), Prediction("u2", "b")],
            [Prediction("u1", "a"), Prediction("u2", "c")],
            [Prediction("u1", "b"), Prediction("u2", "c")],
        ]
        fused = fuse(sets, derive_rng(6))
        assert [(p.utterance_id, p.label) for p in fused] == [("u1", "a"), ("u2", "c")]

    def test_misaligned_ids(self):
        """Test rejection of lists in different utterance order."""
        with pytest.raises(DataError):
            fuse([[Prediction("u1", "a")], [Prediction("u2", "a")]], derive_rng(7))

    def test_length_mismatch(self):
        """Test rejection of lists of different lengths."""
        with pytest.raises(DataError):
            fuse([[Prediction("u1", "a")], []], derive_rng(8))


class TestEvaluate:
    """Test reports."""

    def test_accuracy_and_confusion(self):
        """Test accuracy, recall and the confusion matrix on a small example."""
        report = evaluate(["a", "b", "b", "a"], ["a", "b", "a", "a"])
        assert report.labels == ["a", "b"]
        assert report.accuracy == pytest.approx(0.75)
        np.testing.assert_allclose(report.per_class_accuracy, [2 / 3, 1.0])
        np.testing.assert_array_equal(report.confusion, [[2, 1], [0, 1]])
        np.testing.assert_array_equal(report.support, [3, 1])

    def test_sample_ratio_column(self):
        """Test that training counts become ratios to the largest class."""
        report = evaluate(["a", "b"], ["a", "b"], train_counts={"a": 100, "b": 50})
        np.testing.assert_allclose(report.sample_ratios, [1.0, 0.5])
        assert "ratio%" in report.render(by_class=True)

    def test_categories_in_report(self):
        """Test the optional category column."""
        report = evaluate(["a"], ["a"], categories={"a": "vowel"})
        assert report.to_dict()["classes"][0]["category"] == "vowel"
        assert "vowel" in report.render(by_class=True)

    def test_length_mismatch(self):
        """Test that every prediction needs a reference label."""
        with pytest.raises(DataError):
            evaluate(["a"], ["a", "b"])

    def test_empty(self):
        """Test that empty inputs are rejected."""
        with pytest.raises(DataError):
            evaluate([], [])


class TestSampleRatio:
    """Test class-size ratios."""

    def test_ratios(self):
        """Test counts [100, 50]."""
        np.testing.assert_allclose(sample_ratio([100, 50]), [1.0, 0.5])

    def test_equal_counts(self):
        """Test that equal classes all get ratio 1."""
        np.testing.assert_allclose(sample_ratio([7, 7, 7]), 1.0)

    def test_largest_class_is_exactly_one(self):
        """Test the anchor of the ratio column."""
        assert sample_ratio([3, 250, 40]).max() == 1.0

    def test_all_empty(self):
        """Test that a zero maximum is rejected."""
        with pytest.raises(DataError):
            sample_ratio([0, 0])
