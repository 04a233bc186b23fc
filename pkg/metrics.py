"""
Scoring functions for classification, visual question answering and
report generation, plus percentile-bootstrap confidence intervals.

Classification:
    accuracy, confusion_counts, per_class_prf, aggregate_f1,
    classification_summary
VQA:
    tokenize, token_overlap_scores, score_vqa_item
Report generation:
    bleu1, rouge1, rouge_l, lcs_length, meteor_lite
Intervals:
    bootstrap_ci

Every score lies in [0, 1]. Ratios with a zero denominator are 0.

Two printed formulas are not the textbook ones and are followed on
purpose: rouge1 is unigram recall (overlap / reference length), and
meteor_lite is the per-gold maximum unigram precision averaged over the
gold set, with no fragmentation penalty. rouge_l is the standard LCS
F-measure.
"""

import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Dict, Hashable, Iterable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np

from domain_model import LabelSet
from exceptions import EmptyInputError, ShapeError, ValidationError

CLOSED_RECALL_THRESHOLD = 0.5
OPEN_RECALL_THRESHOLD = 0.75
DEFAULT_BOOTSTRAP_SAMPLES = 1000
DEFAULT_ALPHA = 0.05

T = TypeVar("T")
LabelLike = Union[int, Iterable[int], None]


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator else 0.0


def _paired(truth: Sequence, pred: Sequence) -> int:
    if len(truth) != len(pred):
        raise ShapeError(f"{len(truth)} truth values but {len(pred)} predictions")
    return len(truth)


# Classification

def accuracy(truth: Sequence[Hashable], pred: Sequence[Hashable]) -> float:
    """
    Fraction of positions where prediction equals truth.

    Raises:
        ShapeError: on a length mismatch.
        EmptyInputError: on empty input.
    """
    n = _paired(truth, pred)
    if n == 0:
        raise EmptyInputError("accuracy needs at least one sample")
    correct = sum(1 for y, y_hat in zip(truth, pred) if y == y_hat)
    return correct / n


@dataclass(frozen=True)
class ConfusionCounts:
    """Per-class TP, FP, FN and TN, indexed by label index."""
    tp: Tuple[int, ...]
    fp: Tuple[int, ...]
    fn: Tuple[int, ...]
    tn: Tuple[int, ...]

    @property
    def n_classes(self) -> int:
        return len(self.tp)


def _as_set(value: LabelLike) -> frozenset:
    if value is None:
        return frozenset()
    if isinstance(value, int):
        return frozenset((value,))
    return frozenset(value)


def confusion_counts(truth: Sequence[LabelLike], pred: Sequence[LabelLike], n_classes: int) -> ConfusionCounts:
    """
    One-vs-rest counts per class. Truth and predictions may be single label
    indices or label subsets; None or an empty subset means "no label".
    """
    _paired(truth, pred)
    tp = [0] * n_classes
    fp = [0] * n_classes
    fn = [0] * n_classes
    tn = [0] * n_classes
    for y, y_hat in zip(truth, pred):
        y, y_hat = _as_set(y), _as_set(y_hat)
        for label in y | y_hat:
            if not 0 <= label < n_classes:
                raise ValidationError(f"Label index {label} is outside {n_classes} classes")
        for label in range(n_classes):
            if label in y and label in y_hat:
                tp[label] += 1
            elif label in y_hat:
                fp[label] += 1
            elif label in y:
                fn[label] += 1
            else:
                tn[label] += 1
    return ConfusionCounts(tuple(tp), tuple(fp), tuple(fn), tuple(tn))


def _f1(tp: int, fp: int, fn: int) -> float:
    # Equal to 2PR/(P+R) whenever it is defined.
    return _ratio(2 * tp, 2 * tp + fp + fn)


def per_class_prf(counts: ConfusionCounts, label: int) -> Tuple[float, float, float]:
    """(precision, recall, F1) of one class; each is 0 when its denominator is 0."""
    tp, fp, fn = counts.tp[label], counts.fp[label], counts.fn[label]
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn), _f1(tp, fp, fn)


def aggregate_f1(truth: Sequence[LabelLike], pred: Sequence[LabelLike], labels: LabelSet, mode: str = "macro") -> float:
    """
    Macro-F1 (unweighted mean of per-class F1 over every class of the label
    set) or micro-F1 (F1 of the pooled counts).

    Raises:
        ShapeError: on a length mismatch.
    """
    counts = confusion_counts(truth, pred, len(labels))
    if mode == "macro":
        return math.fsum(per_class_prf(counts, label)[2] for label in range(len(labels))) / len(labels)
    if mode == "micro":
        return _f1(sum(counts.tp), sum(counts.fp), sum(counts.fn))
    raise ValueError(f"mode must be 'macro' or 'micro', not {mode!r}")


def classification_summary(truth: Sequence[LabelLike], pred: Sequence[LabelLike], labels: LabelSet) -> Dict[str, Dict[str, float]]:
    """Per-class precision/recall/F1/support table keyed by display label."""
    counts = confusion_counts(truth, pred, len(labels))
    table = {}
    for label, name in enumerate(labels.labels):
        precision, recall, f1 = per_class_prf(counts, label)
        table[name] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": counts.tp[label] + counts.fn[label],
        }
    return table


# Visual question answering

def tokenize(text: str) -> List[str]:
    """Lowercase, replace every non-alphanumeric character by a space, split."""
    return "".join(ch if ch.isalnum() else " " for ch in text.lower()).split()


def _overlap(pred_tokens: Sequence[str], ref_tokens: Sequence[str]) -> int:
    return sum((Counter(pred_tokens) & Counter(ref_tokens)).values())


def token_overlap_scores(pred_tokens: Sequence[str], ref_tokens: Sequence[str]) -> Tuple[float, float, float]:
    """Multiset-overlap (precision, recall, F1)."""
    matched = _overlap(pred_tokens, ref_tokens)
    precision = _ratio(matched, len(pred_tokens))
    recall = _ratio(matched, len(ref_tokens))
    return precision, recall, _ratio(2 * precision * recall, precision + recall)


@dataclass(frozen=True)
class VqaScore:
    precision: float
    recall: float
    f1: float
    closed_correct: bool
    open_correct: bool


def score_vqa_item(pred_text: str, ref_text: str, closed: bool = True) -> VqaScore:
    """
    Token-overlap scores of one answer. Both correctness flags are filled;
    closed questions count as correct at recall >= 0.5, open ones at >= 0.75.
    The closed argument only selects which flag callers usually read.
    """
    precision, recall, f1 = token_overlap_scores(tokenize(pred_text), tokenize(ref_text))
    return VqaScore(
        precision=precision,
        recall=recall,
        f1=f1,
        closed_correct=recall >= CLOSED_RECALL_THRESHOLD,
        open_correct=recall >= OPEN_RECALL_THRESHOLD,
    )


# Report generation

@dataclass(frozen=True)
class NlgBreakdown:
    """Intermediate quantities of bleu1 and rouge_l."""
    bp: float
    p1: float
    c: int
    r: int
    lcs_len: int
    f_lcs: float


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common token subsequence."""
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, 1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def _breakdown(pred_tokens: Sequence[str], ref_tokens: Sequence[str]) -> NlgBreakdown:
    c, r = len(pred_tokens), len(ref_tokens)
    if c >= r:
        bp = 1.0
    elif c == 0:
        # exp(1 - r/c) has no value at c = 0; keep the penalty inside (0, 1).
        bp = math.exp(-r)
    else:
        bp = math.exp(1 - r / c)
    lcs = lcs_length(pred_tokens, ref_tokens)
    p_lcs, r_lcs = _ratio(lcs, c), _ratio(lcs, r)
    return NlgBreakdown(
        bp=bp,
        p1=_ratio(_overlap(pred_tokens, ref_tokens), c),
        c=c,
        r=r,
        lcs_len=lcs,
        f_lcs=_ratio(2 * p_lcs * r_lcs, p_lcs + r_lcs),
    )


def bleu1(pred_text: str, ref_text: str) -> Tuple[float, NlgBreakdown]:
    """BLEU-1: brevity penalty times clipped unigram precision; 0 without overlap."""
    breakdown = _breakdown(tokenize(pred_text), tokenize(ref_text))
    score = breakdown.bp * breakdown.p1 if breakdown.p1 > 0 else 0.0
    return score, breakdown


def rouge1(pred_text: str, ref_text: str) -> float:
    """Unigram recall: overlapping unigrams over reference unigrams."""
    ref_tokens = tokenize(ref_text)
    return _ratio(_overlap(tokenize(pred_text), ref_tokens), len(ref_tokens))


def rouge_l(pred_text: str, ref_text: str) -> Tuple[float, NlgBreakdown]:
    """LCS F-measure on tokens."""
    breakdown = _breakdown(tokenize(pred_text), tokenize(ref_text))
    return breakdown.f_lcs, breakdown


def meteor_lite(pred_texts: Sequence[str], ref_texts: Sequence[str]) -> float:
    """
    Mean over gold sentences of the best unigram precision any hypothesis
    reaches against it.

    Raises:
        EmptyInputError: if the gold set is empty.
    """
    if not ref_texts:
        raise EmptyInputError("meteor_lite needs at least one gold sentence")
    hypotheses = [tokenize(text) for text in pred_texts]
    best = []
    for gold in ref_texts:
        gold_tokens = tokenize(gold)
        best.append(max((token_overlap_scores(h, gold_tokens)[0] for h in hypotheses), default=0.0))
    return math.fsum(best) / len(ref_texts)


# Confidence intervals

def bootstrap_ci(
    records: Sequence[T],
    statistic: Callable[[Sequence[T]], float],
    n_boot: int = DEFAULT_BOOTSTRAP_SAMPLES,
    seed: Optional[int] = None,
    alpha: float = DEFAULT_ALPHA,
) -> Tuple[float, float, float]:
    """
    Percentile bootstrap.

    Draws n_boot resamples of the records with replacement from a
    generator seeded with seed, evaluates statistic on each, and takes the
    alpha/2 and 1-alpha/2 percentiles (linear interpolation). The
    percentiles are returned as they are, so for skewed statistics such as
    a median the point may fall outside them.

    Returns:
        (point, ci_low, ci_high)

    Raises:
        EmptyInputError: if there are no records.
        ValidationError: if n_boot < 1 or no seed is given.
    """
    if not records:
        raise EmptyInputError("bootstrap_ci needs at least one record")
    if n_boot < 1:
        raise ValidationError(f"Bootstrap sample count must be at least 1, got {n_boot}")
    if seed is None:
        raise ValidationError("bootstrap_ci needs an explicit seed")

    records = list(records)
    point = float(statistic(records))
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(records), size=(n_boot, len(records)))
    replicates = np.array([statistic([records[i] for i in row]) for row in draws.tolist()], dtype=np.float64)
    low, high = np.percentile(replicates, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return point, float(low), float(high)
