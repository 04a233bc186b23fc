import math
import random

import numpy as np
import pytest

from domain_model import LabelSet
from exceptions import EmptyInputError, ShapeError, ValidationError
from metrics import (
    accuracy,
    aggregate_f1,
    bleu1,
    bootstrap_ci,
    classification_summary,
    confusion_counts,
    lcs_length,
    meteor_lite,
    per_class_prf,
    rouge1,
    rouge_l,
    score_vqa_item,
    token_overlap_scores,
    tokenize,
)

BINARY = LabelSet(("Negative", "Positive"))
ABC = LabelSet(("A", "B", "C"))


class TestClassification:
    def test_accuracy(self):
        assert accuracy(["A", "A", "A"], ["A", "B", "A"]) == pytest.approx(2 / 3)

    def test_accuracy_errors(self):
        with pytest.raises(ShapeError):
            accuracy([1, 2], [1])
        with pytest.raises(EmptyInputError):
            accuracy([], [])

    def test_macro_f1_all_positive_binary(self):
        truth, pred = [1, 0], [1, 1]
        counts = confusion_counts(truth, pred, 2)
        assert per_class_prf(counts, 1)[2] == pytest.approx(2 / 3, abs=1e-12)
        assert per_class_prf(counts, 0)[2] == 0.0
        assert aggregate_f1(truth, pred, BINARY, "macro") == pytest.approx(1 / 3, abs=1e-12)

    def test_micro_f1_single_label(self):
        assert aggregate_f1([0, 1], [0, 0], ABC, "micro") == 0.5

    def test_micro_f1_equals_accuracy(self):
        rng = random.Random(21)
        for _ in range(100):
            n = rng.randint(1, 60)
            k = rng.randint(2, 6)
            labels = LabelSet(tuple(f"L{i}" for i in range(k)))
            truth = [rng.randrange(k) for _ in range(n)]
            pred = [rng.randrange(k) for _ in range(n)]
            assert aggregate_f1(truth, pred, labels, "micro") == accuracy(truth, pred)

    def test_macro_f1_ignores_class_order(self):
        rng = random.Random(8)
        for _ in range(50):
            k = rng.randint(2, 6)
            names = [f"L{i}" for i in range(k)]
            truth = [rng.randrange(k) for _ in range(rng.randint(1, 40))]
            pred = [rng.randrange(k) for _ in truth]
            order = names[:]
            rng.shuffle(order)
            moved = {i: order.index(name) for i, name in enumerate(names)}
            assert aggregate_f1([moved[t] for t in truth], [moved[p] for p in pred], LabelSet(tuple(order)), "macro") \
                == aggregate_f1(truth, pred, LabelSet(tuple(names)), "macro")

    def test_multilabel_f1(self):
        truth = [(0, 1, 2), (0,)]
        pred = [(1, 2), (1,)]
        assert aggregate_f1(truth, pred, ABC, "macro") == pytest.approx((0 + 2 / 3 + 1) / 3)
        assert aggregate_f1(truth, pred, ABC, "micro") == pytest.approx(4 / 7)

    def test_empty_prediction_counts_as_no_label(self):
        counts = confusion_counts([(0,)], [()], 2)
        assert counts.fn == (1, 0)
        assert counts.tn == (0, 1)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            confusion_counts([0], [5], 2)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            aggregate_f1([0], [0], BINARY, "weighted")

    def test_summary(self):
        table = classification_summary([1, 0, 1], [1, 1, 1], BINARY)
        assert table["Positive"] == {"precision": 2 / 3, "recall": 1.0, "f1": 0.8, "support": 2}
        assert table["Negative"]["f1"] == 0.0


class TestVqa:
    def test_tokenize(self):
        assert tokenize("Left-lower LOBE, yes!") == ["left", "lower", "lobe", "yes"]

    def test_overlap_scores(self):
        precision, recall, f1 = token_overlap_scores(["left"], ["left", "lung"])
        assert (precision, recall) == (1.0, 0.5)
        assert f1 == pytest.approx(2 / 3)

    def test_overlap_counts_multisets(self):
        assert token_overlap_scores(["a", "a", "a"], ["a", "b"])[0] == pytest.approx(1 / 3)

    def test_closed_threshold_is_inclusive(self):
        score = score_vqa_item("left", "left lung", closed=True)
        assert score.recall == 0.5
        assert score.closed_correct

    def test_open_threshold(self):
        score = score_vqa_item("left lobe", "left upper lobe", closed=False)
        assert score.recall == pytest.approx(2 / 3)
        assert not score.open_correct
        assert score.closed_correct

    def test_empty_answer(self):
        score = score_vqa_item("", "yes")
        assert (score.precision, score.recall, score.f1) == (0.0, 0.0, 0.0)


class TestReportGeneration:
    def test_bleu1_brevity_penalty(self):
        score, breakdown = bleu1("the cat", "the cat sat")
        assert score == pytest.approx(math.exp(-0.5), abs=1e-9)
        assert (breakdown.c, breakdown.r, breakdown.p1) == (2, 3, 1.0)

    def test_bleu1_no_penalty_for_long_candidates(self):
        score, breakdown = bleu1("the cat sat down", "the cat sat")
        assert breakdown.bp == 1.0
        assert score == pytest.approx(0.75)

    def test_bleu1_clips_repeated_tokens(self):
        assert bleu1("the the the", "the cat")[0] == pytest.approx(1 / 3)

    def test_bleu1_empty_candidate(self):
        score, breakdown = bleu1("", "the cat")
        assert score == 0.0
        assert 0.0 < breakdown.bp < 1.0

    def test_rouge1_is_recall(self):
        assert rouge1("a b", "a c d") == pytest.approx(1 / 3)

    def test_rouge_l(self):
        score, breakdown = rouge_l("a b c", "a c d")
        assert breakdown.lcs_len == 2
        assert score == pytest.approx(2 / 3, abs=1e-12)

    def test_lcs_length(self):
        assert lcs_length(list("abcbdab"), list("bdcaba")) == 4
        assert lcs_length([], ["a"]) == 0

    def test_meteor_lite(self):
        assert meteor_lite(["a c"], ["a b"]) == 0.5
        assert meteor_lite(["a b"], ["a b", "c d"]) == 0.5

    def test_meteor_lite_needs_gold(self):
        with pytest.raises(EmptyInputError):
            meteor_lite(["a"], [])

    def test_scores_stay_in_unit_interval(self):
        rng = random.Random(3)
        words = ["no", "acute", "process", "effusion", "heart", "size", "normal"]
        for _ in range(200):
            pred = " ".join(rng.choice(words) for _ in range(rng.randint(0, 8)))
            ref = " ".join(rng.choice(words) for _ in range(rng.randint(1, 8)))
            for value in (bleu1(pred, ref)[0], rouge1(pred, ref), rouge_l(pred, ref)[0], meteor_lite([pred], [ref])):
                assert 0.0 <= value <= 1.0


def _mean(values):
    return sum(values) / len(values)


class TestBootstrap:
    def test_constant_data_gives_zero_width(self):
        point, low, high = bootstrap_ci([1.0] * 30, _mean, n_boot=200, seed=1)
        assert point == low == high == 1.0

    def test_seeded_determinism(self):
        rng = random.Random(5)
        data = [rng.random() for _ in range(50)]
        assert bootstrap_ci(data, _mean, n_boot=300, seed=42) == bootstrap_ci(data, _mean, n_boot=300, seed=42)

    def test_different_seeds_differ(self):
        data = list(np.random.default_rng(0).random(50))
        assert bootstrap_ci(data, _mean, n_boot=300, seed=1) != bootstrap_ci(data, _mean, n_boot=300, seed=2)

    def test_returns_raw_percentiles(self):
        data = list(range(20))

        def untouched(records):
            return 1.0 if list(records) == data else 0.0

        assert bootstrap_ci(data, untouched, n_boot=50, seed=3) == (1.0, 0.0, 0.0)

    def test_matches_percentiles_of_seeded_resamples(self):
        data = list(np.random.default_rng(6).exponential(size=15))
        draws = np.random.default_rng(11).integers(0, len(data), size=(100, len(data)))
        replicates = [float(np.median([data[i] for i in row])) for row in draws]
        expected = np.percentile(replicates, [2.5, 97.5])
        point, low, high = bootstrap_ci(data, np.median, n_boot=100, seed=11)
        assert point == float(np.median(data))
        assert (low, high) == pytest.approx(tuple(expected), rel=1e-12)

    def test_bernoulli_matches_normal_approximation(self):
        rng = np.random.default_rng(123)
        data = (rng.random(200) < 0.8).astype(float).tolist()
        point, low, high = bootstrap_ci(data, _mean, n_boot=1000, seed=7)
        half_width = 1.959964 * math.sqrt(point * (1 - point) / len(data))
        assert low == pytest.approx(point - half_width, abs=0.03)
        assert high == pytest.approx(point + half_width, abs=0.03)

    def test_errors(self):
        with pytest.raises(EmptyInputError):
            bootstrap_ci([], _mean, seed=1)
        with pytest.raises(ValidationError):
            bootstrap_ci([1.0], _mean, n_boot=0, seed=1)
        with pytest.raises(ValidationError):
            bootstrap_ci([1.0], _mean)
