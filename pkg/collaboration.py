"""
This module implements generalist-specialist collaboration at inference time.

Mixture-of-expert diagnosis (MoED) feeds the specialists' predicted labels
to the generalist as reference answers; retrieval-augmented diagnosis (RAD)
feeds it the annotations of the most similar database cases. The voting
baseline aggregates the specialists without any generalist.

Classes:
    VoteOutcome: winning labels, per-label tally and the tie flag.
    GscoConfig: which contexts to use and which instruction variant.
    PanelResult: specialist predictions plus per-specialist failures.
    Mode: the six run modes.
    InferenceRunner: runs one mode over many samples with a worker pool.

Functions:
    gather_specialist_predictions, majority_vote, multilabel_vote,
    format_moed_context, format_rad_context, build_prompt,
    run_collaborative_inference
"""

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from backend_gateway import BackendRegistry, parse_prediction
from corpus import RunRecord
from domain_model import Diagnosis, LabelSet, Sample, SpecialistPrediction, TaskKind
from exceptions import (
    AllBackendsFailedError,
    ConfigError,
    EmptyVoteError,
    GscoError,
    InferenceError,
    ValidationError,
)
from prompt_engine import GSCO_VARIANTS, render_prompt
from vector_index import Index, RetrievalConfig, RetrievedCase, query_topk

logger = logging.getLogger(__name__)

NONE_CONTEXT = "none"


class GenerateBackend(Protocol):
    backend_id: str

    def generate(self, image_ref: str, prompt: str) -> str: ...


class PredictBackend(Protocol):
    backend_id: str

    def predict(self, image_ref: str, labels: LabelSet) -> SpecialistPrediction: ...


class EmbedBackend(Protocol):
    backend_id: str

    def embed(self, image_ref: str) -> np.ndarray: ...


@dataclass(frozen=True)
class VoteOutcome:
    winning_labels: Tuple[int, ...]
    tally: Dict[int, int]
    tied: bool


@dataclass(frozen=True)
class GscoConfig:
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    use_moed: bool = True
    use_rad: bool = True
    gsco_template_variant: int = 0

    def __post_init__(self) -> None:
        if not 0 <= self.gsco_template_variant < len(GSCO_VARIANTS):
            raise ConfigError(
                f"gsco_template_variant must lie in [0, {len(GSCO_VARIANTS) - 1}], got {self.gsco_template_variant}"
            )


@dataclass
class PanelResult:
    """Predictions of the specialists that answered, in registration order."""
    predictions: List[SpecialistPrediction]
    failures: Dict[str, str] = field(default_factory=dict)


def gather_specialist_predictions(
    sample: Sample,
    specialists: Sequence[PredictBackend],
    labels: LabelSet,
) -> PanelResult:
    """
    Feeds the sample's image to every specialist.

    A failing specialist is recorded and skipped.

    Raises:
        ConfigError: if no specialist is registered.
        AllBackendsFailedError: if every specialist failed.
    """
    if not specialists:
        raise ConfigError("At least one specialist must be registered")
    if not sample.task.is_classification:
        raise ConfigError(f"Specialists only answer classification tasks, not {sample.task.value}")

    result = PanelResult(predictions=[])
    for specialist in specialists:
        try:
            prediction = specialist.predict(sample.image_ref, labels)
            prediction.validate(labels, sample.task)
        except GscoError as err:
            logger.warning("Specialist %s failed on %s: %s", specialist.backend_id, sample.id, err)
            result.failures[specialist.backend_id] = str(err)
            continue
        result.predictions.append(prediction)

    if not result.predictions:
        raise AllBackendsFailedError(result.failures)
    return result


def _tally(predictions: Sequence[SpecialistPrediction], labels: LabelSet) -> Dict[int, int]:
    tally = {index: 0 for index in range(len(labels))}
    for prediction in predictions:
        for index in labels.require_indices(prediction.labels):
            tally[index] += 1
    return tally


def majority_vote(predictions: Sequence[SpecialistPrediction], labels: LabelSet) -> VoteOutcome:
    """
    Single-label majority vote, every specialist weighted equally.

    On a tie among the top counts the earliest tied label in label-set
    order wins and the outcome is flagged tied.

    Raises:
        EmptyVoteError: if there are no predictions.
        ValidationError: if a prediction does not carry exactly one label.
    """
    if not predictions:
        raise EmptyVoteError()
    for prediction in predictions:
        if len(prediction.labels) != 1:
            raise ValidationError(
                f"Specialist {prediction.specialist_id} has {len(prediction.labels)} labels; majority vote needs one"
            )
    tally = _tally(predictions, labels)
    top = max(tally.values())
    leaders = [index for index, count in tally.items() if count == top]
    return VoteOutcome(winning_labels=(min(leaders),), tally=tally, tied=len(leaders) > 1)


def multilabel_vote(predictions: Sequence[SpecialistPrediction], labels: LabelSet) -> VoteOutcome:
    """
    Multilabel vote: a label wins iff more than half the specialists chose it.

    An empty result falls back to the label set's negative label, when one
    is designated. The tied flag marks a label that got exactly half the votes.

    Raises:
        EmptyVoteError: if there are no predictions.
    """
    if not predictions:
        raise EmptyVoteError()
    n = len(predictions)
    tally = _tally(predictions, labels)
    winners = tuple(index for index, count in tally.items() if 2 * count > n)
    if not winners and labels.negative_label is not None:
        winners = (labels.negative_label,)
    tied = any(2 * count == n for count in tally.values())
    return VoteOutcome(winning_labels=winners, tally=tally, tied=tied)


def _join(displays: Sequence[str]) -> str:
    return "+".join(displays) or NONE_CONTEXT


def format_moed_context(predictions: Sequence[SpecialistPrediction], labels: LabelSet) -> str:
    """Specialist answers in registration order, e.g. 'Pneumonia, Normal' or 'A+B, A'."""
    return ", ".join(_join(labels.displays(p.labels)) for p in predictions)


def format_rad_context(cases: Sequence[RetrievedCase], task: Optional[TaskKind] = None) -> str:
    """
    Annotations of the retrieved cases, most similar first.

    Classification indexes contribute their labels; for VQA/report tasks the
    top case's text is used verbatim. No cases gives 'none'.
    """
    if not cases:
        return NONE_CONTEXT
    generative = task.is_generation if task is not None else cases[0].meta_labels is None
    if generative:
        return cases[0].meta_text or NONE_CONTEXT
    return ", ".join(_join(case.meta_labels or ()) for case in cases)


def build_prompt(
    sample: Sample,
    labels: Optional[LabelSet],
    cfg: GscoConfig,
    moed: Optional[str] = None,
    rad: Optional[str] = None,
) -> str:
    """
    Renders the prompt for one sample. With both contexts disabled this is
    the plain task template (CLS, VQA or MRG).
    """
    if sample.task.is_classification:
        if not cfg.use_moed and not cfg.use_rad:
            return render_prompt("CLS", {"Modality": sample.modality, "Label Set": labels})
        return render_prompt(GSCO_VARIANTS[cfg.gsco_template_variant], {
            "Modality": sample.modality,
            "Label Set": labels,
            "RAD": rad if cfg.use_rad else NONE_CONTEXT,
            "MoED": moed if cfg.use_moed else NONE_CONTEXT,
        })
    if cfg.use_moed:
        raise ConfigError(f"Mixture-of-expert context needs a classification task, not {sample.task.value}")
    if sample.task.is_vqa:
        if cfg.use_rad:
            return render_prompt("VQA-RAD", {"Question": sample.question, "RAD": rad})
        return render_prompt("VQA", {"Question": sample.question})
    if cfg.use_rad:
        return render_prompt("MRG-RAD", {"RAD": rad})
    return render_prompt("MRG", {})


def run_collaborative_inference(
    sample: Sample,
    specialists: Sequence[PredictBackend],
    index: Optional[Index],
    gfm: GenerateBackend,
    cfg: GscoConfig,
    labels: Optional[LabelSet] = None,
    embedder: Optional[EmbedBackend] = None,
) -> Diagnosis:
    """
    Runs the collaborative pipeline on one sample: specialist panel, then
    retrieval, then prompt rendering, then generation, then parsing.

    Raises:
        ConfigError: if an enabled context lacks its backend or index.
        AllBackendsFailedError: if every specialist failed.
        InferenceError: if the generalist fails.
    """
    if sample.task.is_classification and labels is None:
        raise ConfigError(f"Sample {sample.id}: classification needs a label set")

    moed = None
    if cfg.use_moed:
        panel = gather_specialist_predictions(sample, specialists, labels)
        moed = format_moed_context(panel.predictions, labels)

    rad = None
    if cfg.use_rad:
        if index is None or embedder is None:
            raise ConfigError("Retrieval needs both an index and an embed backend")
        cases = query_topk(index, embedder.embed(sample.image_ref), cfg.retrieval)
        rad = format_rad_context(cases, sample.task)

    prompt = build_prompt(sample, labels, cfg, moed=moed, rad=rad)
    try:
        text = gfm.generate(sample.image_ref, prompt)
    except GscoError as err:
        raise InferenceError(f"Generalist {gfm.backend_id} failed on {sample.id}: {err}") from err

    if sample.task.is_generation:
        return Diagnosis(sample_id=sample.id, raw_text=text, generated_text=text.strip(),
                         context_moed=moed, context_rad=rad)

    predicted, warning = parse_prediction(text, labels, sample.task)
    if warning:
        logger.warning("Could not map generator output for %s onto the label set: %r", sample.id, text)
    return Diagnosis(sample_id=sample.id, raw_text=text, predicted_labels=predicted,
                     context_moed=moed, context_rad=rad, parse_warning=warning)


class Mode(Enum):
    GFM = "gfm"
    SPECIALIST = "specialist"
    VOTING = "voting"
    MOED = "moed"
    RAD = "rad"
    GSCO = "gsco"

    @property
    def needs_generalist(self) -> bool:
        return self not in (Mode.SPECIALIST, Mode.VOTING)

    @property
    def needs_specialists(self) -> bool:
        return self in (Mode.SPECIALIST, Mode.VOTING, Mode.MOED, Mode.GSCO)

    @property
    def needs_retrieval(self) -> bool:
        return self in (Mode.RAD, Mode.GSCO)

    def gsco_config(self, retrieval: RetrievalConfig, variant: int = 0) -> GscoConfig:
        return GscoConfig(
            retrieval=retrieval,
            use_moed=self in (Mode.MOED, Mode.GSCO),
            use_rad=self in (Mode.RAD, Mode.GSCO),
            gsco_template_variant=variant,
        )


class InferenceRunner:
    """
    Runs one mode over a set of samples.

    Samples are independent; they run on a bounded thread pool and the
    records come back sorted by sample_id regardless of completion order.
    """

    def __init__(
        self,
        mode: Mode,
        registry: BackendRegistry,
        labels: Optional[LabelSet],
        task: TaskKind,
        index: Optional[Index] = None,
        retrieval: Optional[RetrievalConfig] = None,
        variant: int = 0,
        workers: int = 4,
        exclude_self: bool = False,
        specialist_id: Optional[str] = None,
    ):
        self.mode = mode
        self.registry = registry
        self.labels = labels
        self.task = task
        self.index = index
        self.cfg = mode.gsco_config(retrieval or RetrievalConfig(), variant)
        self.workers = workers
        self.exclude_self = exclude_self
        self.specialist_id = specialist_id

    def validate(self) -> None:
        """
        Checks that the mode's backends and index are configured. Runs
        before any backend is contacted.

        Raises:
            ConfigError: describing the first missing piece.
        """
        if self.workers < 1:
            raise ConfigError("Worker count must be at least 1")
        if self.mode.needs_generalist and self.registry.generalist is None:
            raise ConfigError(f"Mode {self.mode.value} needs a generate backend")
        if self.mode.needs_specialists:
            if not self.task.is_classification:
                raise ConfigError(f"Mode {self.mode.value} needs a classification task, not {self.task.value}")
            if not self.registry.specialists:
                raise ConfigError(f"Mode {self.mode.value} needs at least one predict backend")
            if self.specialist_id is not None:
                self.registry.specialist(self.specialist_id)
        if self.mode.needs_retrieval:
            if self.index is None:
                raise ConfigError(f"Mode {self.mode.value} needs an index")
            if self.registry.embedder is None:
                raise ConfigError(f"Mode {self.mode.value} needs an embed backend")
            if self.registry.embedder.descriptor.dimension != self.index.dimension:
                raise ConfigError(
                    f"Embed backend dimension {self.registry.embedder.descriptor.dimension} "
                    f"differs from index dimension {self.index.dimension}"
                )

    def _diagnose(self, sample: Sample) -> Diagnosis:
        if self.mode is Mode.SPECIALIST:
            specialist = (self.registry.specialist(self.specialist_id) if self.specialist_id
                          else self.registry.specialists[0])
            prediction = specialist.predict(sample.image_ref, self.labels)
            prediction.validate(self.labels, sample.task)
            text = format_moed_context([prediction], self.labels)
            return Diagnosis(sample_id=sample.id, raw_text=text, predicted_labels=prediction.labels)

        if self.mode is Mode.VOTING:
            panel = gather_specialist_predictions(sample, self.registry.specialists, self.labels)
            vote = multilabel_vote if sample.task is TaskKind.CLS_MULTILABEL else majority_vote
            outcome = vote(panel.predictions, self.labels)
            if outcome.tied:
                logger.info("Vote on %s tied: %s", sample.id, outcome.tally)
            return Diagnosis(
                sample_id=sample.id,
                raw_text=_join(self.labels.displays(outcome.winning_labels)),
                predicted_labels=outcome.winning_labels,
                context_moed=format_moed_context(panel.predictions, self.labels),
            )

        cfg = self.cfg
        if self.exclude_self:
            cfg = dataclasses.replace(cfg, retrieval=dataclasses.replace(cfg.retrieval, exclude_id=sample.id))
        return run_collaborative_inference(
            sample,
            self.registry.specialists,
            self.index,
            self.registry.generalist,
            cfg,
            labels=self.labels,
            embedder=self.registry.embedder,
        )

    def run_sample(self, sample: Sample) -> RunRecord:
        started = time.perf_counter()
        diagnosis = self._diagnose(sample)
        return RunRecord(
            sample_id=sample.id,
            mode=self.mode.value,
            diagnosis=diagnosis,
            duration_s=time.perf_counter() - started,
        )

    def run(self, samples: Sequence[Sample]) -> List[RunRecord]:
        self.validate()
        logger.info("Running mode %s over %d samples with %d workers.", self.mode.value, len(samples), self.workers)
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            records = list(pool.map(self.run_sample, samples))
        return sorted(records, key=lambda record: record.sample_id)
