"""
Shared vocabulary used by every other module: task kinds, label sets,
samples, specialist predictions and diagnoses, plus the label
normalization rule that lets free-form generator text be matched against
a label vocabulary.

All types are frozen dataclasses and safe to share between worker threads.
"""

import re
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

from exceptions import LabelSetError, ValidationError

_WHITESPACE_RUN = re.compile(r"\s+")
_TRAILING_PERIODS = re.compile(r"[\s.]+$")


def normalize_label(text: str) -> str:
    """
    Canonical form of a label or of generator text.

    NFC, lowercased, whitespace runs collapsed to one space, trimmed, and
    trailing periods removed. Idempotent.
    """
    text = unicodedata.normalize("NFC", text)
    text = unicodedata.normalize("NFC", text.lower())
    text = _WHITESPACE_RUN.sub(" ", text).strip()
    return _TRAILING_PERIODS.sub("", text)


class TaskKind(Enum):
    """The six task kinds; each one fixes which metric family scores it."""
    CLS_BINARY = "cls-binary"
    CLS_MULTICLASS = "cls-multiclass"
    CLS_MULTILABEL = "cls-multilabel"
    VQA_CLOSED = "vqa-closed"
    VQA_OPEN = "vqa-open"
    MRG = "mrg"

    @classmethod
    def parse(cls, value: str) -> "TaskKind":
        try:
            return cls(value)
        except ValueError as err:
            known = ", ".join(kind.value for kind in cls)
            raise ValidationError(f"Unknown task kind {value!r} (expected one of {known})") from err

    @property
    def is_classification(self) -> bool:
        return self in (TaskKind.CLS_BINARY, TaskKind.CLS_MULTICLASS, TaskKind.CLS_MULTILABEL)

    @property
    def is_single_label(self) -> bool:
        return self in (TaskKind.CLS_BINARY, TaskKind.CLS_MULTICLASS)

    @property
    def is_vqa(self) -> bool:
        return self in (TaskKind.VQA_CLOSED, TaskKind.VQA_OPEN)

    @property
    def is_generation(self) -> bool:
        return self.is_vqa or self is TaskKind.MRG


@dataclass(frozen=True)
class LabelSet:
    """
    Ordered label vocabulary of a classification task.

    Attributes:
        labels: display strings, in canonical order.
        negative_label: index of the designated no-finding label, if any.
    """
    labels: Tuple[str, ...]
    negative_label: Optional[int] = None
    _lookup: Dict[str, int] = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise LabelSetError("Label set must not be empty")

        lookup: Dict[str, int] = {}
        for index, label in enumerate(labels):
            key = normalize_label(label)
            if not key:
                raise LabelSetError(f"Label {index} is blank")
            if key in lookup:
                raise LabelSetError(
                    f"Labels {labels[lookup[key]]!r} and {label!r} normalize to the same form {key!r}"
                )
            lookup[key] = index
        object.__setattr__(self, "_lookup", lookup)

        if self.negative_label is not None and not 0 <= self.negative_label < len(labels):
            raise LabelSetError(f"negative_label {self.negative_label} is out of range")

    @classmethod
    def from_names(cls, labels: Iterable[str], negative: Optional[str] = None) -> "LabelSet":
        """Builds a label set, naming the negative label by its display string."""
        labels = tuple(labels)
        label_set = cls(labels)
        if negative is None:
            return label_set
        index = label_set.index_of(negative)
        if index is None:
            raise LabelSetError(f"negative label {negative!r} is not in the label set")
        return cls(labels, negative_label=index)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def normalized(self) -> Tuple[str, ...]:
        return tuple(normalize_label(label) for label in self.labels)

    def index_of(self, text: str) -> Optional[int]:
        """Index of the label whose normalized form equals normalize(text)."""
        return self._lookup.get(normalize_label(text))

    def display(self, index: int) -> str:
        return self.labels[index]

    def displays(self, indices: Iterable[int]) -> List[str]:
        return [self.labels[i] for i in indices]

    def require_indices(self, indices: Iterable[int]) -> Tuple[int, ...]:
        """Validates a label subset and returns it as a tuple."""
        result = tuple(indices)
        for index in result:
            if not isinstance(index, int) or not 0 <= index < len(self.labels):
                raise ValidationError(f"Label index {index!r} is outside the label set")
        if len(set(result)) != len(result):
            raise ValidationError(f"Label indices {result} contain duplicates")
        return result


@dataclass(frozen=True)
class Sample:
    """One evaluation item of a dataset."""
    id: str
    image_ref: str
    modality: str
    task: TaskKind
    truth_labels: Optional[Tuple[int, ...]] = None
    question: Optional[str] = None
    reference_text: Optional[str] = None

    def validate(self, label_set: Optional[LabelSet]) -> None:
        """
        Checks the task-required fields.

        Raises:
            ValidationError: if a field required by the task kind is missing
                or the truth labels break the task's cardinality.
        """
        if not self.id:
            raise ValidationError("Sample id must not be empty")
        if self.task.is_classification:
            if label_set is None:
                raise ValidationError(f"Sample {self.id}: classification requires a label set")
            if self.truth_labels is None:
                raise ValidationError(f"Sample {self.id}: classification requires truth labels")
            label_set.require_indices(self.truth_labels)
            if self.task.is_single_label and len(self.truth_labels) != 1:
                raise ValidationError(
                    f"Sample {self.id}: {self.task.value} requires exactly one truth label, "
                    f"got {len(self.truth_labels)}"
                )
        if self.task.is_vqa:
            if not self.question:
                raise ValidationError(f"Sample {self.id}: VQA requires a question")
            if self.reference_text is None:
                raise ValidationError(f"Sample {self.id}: VQA requires a reference answer")
        if self.task is TaskKind.MRG and self.reference_text is None:
            raise ValidationError(f"Sample {self.id}: report generation requires a reference report")


@dataclass(frozen=True)
class SpecialistPrediction:
    """Labels (and optional scores) one specialist assigned to one image."""
    specialist_id: str
    labels: Tuple[int, ...]
    scores: Optional[Tuple[float, ...]] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.scores is not None:
            object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
            if len(self.scores) != len(self.labels):
                raise ValidationError(
                    f"Specialist {self.specialist_id}: {len(self.scores)} scores for {len(self.labels)} labels"
                )
            if any(not 0.0 <= s <= 1.0 for s in self.scores):
                raise ValidationError(f"Specialist {self.specialist_id}: scores must lie in [0, 1]")

    def validate(self, label_set: LabelSet, task: TaskKind) -> None:
        label_set.require_indices(self.labels)
        if task.is_single_label and len(self.labels) != 1:
            raise ValidationError(
                f"Specialist {self.specialist_id} returned {len(self.labels)} labels for a {task.value} task"
            )


@dataclass(frozen=True)
class Diagnosis:
    """
    Final answer of a pipeline run for one sample.

    Classification runs populate predicted_labels; generation runs populate
    generated_text. raw_text always holds the untouched generator output.
    """
    sample_id: str
    raw_text: str
    predicted_labels: Optional[Tuple[int, ...]] = None
    generated_text: Optional[str] = None
    context_moed: Optional[str] = None
    context_rad: Optional[str] = None
    parse_warning: bool = False

    def __post_init__(self) -> None:
        if (self.predicted_labels is None) == (self.generated_text is None):
            raise ValidationError(
                f"Diagnosis {self.sample_id}: exactly one of predicted_labels and generated_text must be set"
            )
        if self.predicted_labels is not None:
            object.__setattr__(self, "predicted_labels", tuple(self.predicted_labels))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sample_id": self.sample_id,
            "predicted_labels": list(self.predicted_labels) if self.predicted_labels is not None else None,
            "generated_text": self.generated_text,
            "raw_text": self.raw_text,
            "context_moed": self.context_moed,
            "context_rad": self.context_rad,
            "parse_warning": self.parse_warning,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Diagnosis":
        labels = data.get("predicted_labels")
        return cls(
            sample_id=data["sample_id"],
            raw_text=data["raw_text"],
            predicted_labels=tuple(labels) if labels is not None else None,
            generated_text=data.get("generated_text"),
            context_moed=data.get("context_moed"),
            context_rad=data.get("context_rad"),
            parse_warning=bool(data.get("parse_warning", False)),
        )

