"""
This module handles everything that goes to or comes from disk around a
run: dataset manifests, diagnosis-guided bootstrapping (DGB) prompt
batches, run records and evaluation reports.

Manifest format (UTF-8 JSONL):
    line 1: {"name", "task", "label_set"?, "negative_label"?}
    then one sample per line:
        {"id", "image", "modality", "task"?, "labels"?, "question"?, "answer"?, "report"?}

Report format: {"dataset", "mode", "n", "metrics": {name: {"point", "ci_low", "ci_high"}}, "seed", "B"}
plus a plain-text table with cells shaped "estimate (ci_low, ci_high)".

Functions:
    load_manifest(path) -> DatasetManifest
    save_manifest(manifest, path) -> None
    build_dgb_prompts(manifest) -> List[DgbPrompt]
    save_records(records, path, timings_path) / load_records(path)
    write_report(records, manifest, config, output_dir) -> EvalReport
    render_report_table(report) -> str
    load_report(path) / merge_reports(reports) / render_comparison(reports)
"""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from domain_model import Diagnosis, LabelSet, Sample, TaskKind
from exceptions import (
    DuplicateIdError,
    EmptyInputError,
    ParseError,
    StorageError,
    ValidationError,
)
import metrics
from prompt_engine import render_prompt
from utils import dump_canonical_json, load_from_json, save_to_json

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
NO_FINDING = "No finding"
MODES = ("gfm", "specialist", "voting", "moed", "rad", "gsco")


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    task: TaskKind
    label_set: Optional[LabelSet]
    samples: Tuple[Sample, ...]

    def sample_index(self) -> Dict[str, Sample]:
        return {sample.id: sample for sample in self.samples}


def _read_lines(path: Path) -> List[Tuple[int, Dict[str, Any]]]:
    rows = []
    try:
        with path.open("r", encoding="utf-8") as f:
            for line_num, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as err:
                    raise ParseError(f"JSON error: {err}", lines=[line_num]) from err
                if not isinstance(record, dict):
                    raise ParseError("Expected a JSON object", lines=[line_num])
                rows.append((line_num, record))
    except OSError as err:
        raise StorageError(f"Failed to read {path}: {err}") from err
    return rows


def _label_indices(values: Any, label_set: LabelSet, line_num: int) -> Tuple[int, ...]:
    if isinstance(values, str):
        values = [values]
    if not isinstance(values, list):
        raise ValidationError("'labels' must be a list of label strings", lines=[line_num])
    indices = []
    for text in values:
        index = label_set.index_of(text) if isinstance(text, str) else None
        if index is None:
            raise ValidationError(f"Label {text!r} is not in the label set", lines=[line_num])
        indices.append(index)
    return tuple(indices)


def _parse_sample(record: Dict[str, Any], line_num: int, task: TaskKind, label_set: Optional[LabelSet]) -> Sample:
    for key in ("id", "image", "modality"):
        if not isinstance(record.get(key), str):
            raise ValidationError(f"Missing or non-string field {key!r}", lines=[line_num])
    if "task" in record and record["task"] != task.value:
        raise ValidationError(f"Sample task {record['task']!r} differs from manifest task {task.value!r}",
                              lines=[line_num])

    truth = None
    if task.is_classification:
        truth = _label_indices(record.get("labels", []), label_set, line_num)
    reference = record.get("answer") if task.is_vqa else record.get("report")

    sample = Sample(
        id=record["id"],
        image_ref=record["image"],
        modality=record["modality"],
        task=task,
        truth_labels=truth,
        question=record.get("question"),
        reference_text=reference,
    )
    try:
        sample.validate(label_set)
    except ValidationError as err:
        raise ValidationError(err.message, lines=[line_num]) from err
    return sample


def load_manifest(path: PathLike) -> DatasetManifest:
    """
    Reads and fully validates a dataset manifest.

    Raises:
        ParseError: for a line that is not a JSON object (with its line number).
        DuplicateIdError: for a repeated sample id (citing both lines).
        ValidationError: for a label outside the set or a missing task field.
    """
    path = Path(path)
    rows = _read_lines(path)
    if not rows:
        raise ValidationError(f"{path} has no header line")

    header_line, header = rows[0]
    if not isinstance(header.get("name"), str) or "task" not in header:
        raise ValidationError("Header must declare 'name' and 'task'", lines=[header_line])
    try:
        task = TaskKind.parse(header["task"])
        label_set = None
        if task.is_classification:
            if not isinstance(header.get("label_set"), list):
                raise ValidationError("Classification manifests must declare 'label_set'")
            label_set = LabelSet.from_names(header["label_set"], header.get("negative_label"))
    except ValidationError as err:
        raise ValidationError(err.message, lines=[header_line]) from err

    samples = []
    first_seen: Dict[str, int] = {}
    for line_num, record in rows[1:]:
        sample = _parse_sample(record, line_num, task, label_set)
        if sample.id in first_seen:
            raise DuplicateIdError(f"Duplicate sample id {sample.id!r}", lines=[first_seen[sample.id], line_num])
        first_seen[sample.id] = line_num
        samples.append(sample)

    manifest = DatasetManifest(name=header["name"], task=task, label_set=label_set, samples=tuple(samples))
    logger.info("Loaded manifest %s with %d samples from %s.", manifest.name, len(samples), path)
    return manifest


def save_manifest(manifest: DatasetManifest, path: PathLike) -> None:
    """Writes a manifest that load_manifest reads back to an equal one."""
    header: Dict[str, Any] = {"name": manifest.name, "task": manifest.task.value}
    if manifest.label_set is not None:
        header["label_set"] = list(manifest.label_set.labels)
        if manifest.label_set.negative_label is not None:
            header["negative_label"] = manifest.label_set.display(manifest.label_set.negative_label)

    lines = [header]
    for sample in manifest.samples:
        row: Dict[str, Any] = {"id": sample.id, "image": sample.image_ref, "modality": sample.modality}
        if sample.truth_labels is not None:
            row["labels"] = manifest.label_set.displays(sample.truth_labels)
        if sample.question is not None:
            row["question"] = sample.question
        if sample.reference_text is not None:
            row["answer" if manifest.task.is_vqa else "report"] = sample.reference_text
        lines.append(row)
    _write_jsonl(lines, Path(path))


def _write_jsonl(rows: Sequence[Dict[str, Any]], path: Path) -> None:
    try:
        with path.open("w", encoding="utf-8", newline="\n") as f:
            for row in rows:
                f.write(dump_canonical_json(row, indent=None))
                f.write("\n")
    except OSError as err:
        raise StorageError(f"Failed to write {path}: {err}") from err


@dataclass(frozen=True)
class DgbPrompt:
    """The report-drafting prompt plus the instruction the drafted report is later tuned against."""
    sample_id: str
    image_ref: str
    prompt: str
    instruction: str


def build_dgb_prompts(manifest: DatasetManifest) -> List[DgbPrompt]:
    """
    One diagnosis-guided bootstrapping prompt per sample, naming the
    sample's modality and its verified diagnosis.

    Samples without a label are prompted with the negative label (or
    "No finding"); samples with several labels are skipped with a warning.

    Raises:
        ValidationError: if the manifest is not a classification manifest.
    """
    if not manifest.task.is_classification:
        raise ValidationError(f"DGB prompts need a classification manifest, not {manifest.task.value}")

    label_set = manifest.label_set
    prompts = []
    for sample in manifest.samples:
        truth = sample.truth_labels or ()
        if len(truth) > 1:
            logger.warning("Skipping DGB prompt for %s: it has %d labels", sample.id, len(truth))
            continue
        if truth:
            disease = label_set.display(truth[0])
        elif label_set.negative_label is not None:
            disease = label_set.display(label_set.negative_label)
        else:
            disease = NO_FINDING
        prompt = render_prompt("DGB", {"Modality": sample.modality, "Disease": disease})
        instruction = render_prompt("DGB-SFT", {"Modality": sample.modality})
        prompts.append(DgbPrompt(
            sample_id=sample.id, image_ref=sample.image_ref, prompt=prompt, instruction=instruction,
        ))
    return prompts


def save_dgb_prompts(prompts: Sequence[DgbPrompt], path: PathLike) -> None:
    _write_jsonl([
        {"sample_id": p.sample_id, "image_ref": p.image_ref, "prompt": p.prompt, "instruction": p.instruction}
        for p in prompts
    ], Path(path))


@dataclass(frozen=True)
class RunRecord:
    """One diagnosis produced for one sample in one mode."""
    sample_id: str
    mode: str
    diagnosis: Diagnosis
    duration_s: Optional[float] = None

    def to_dict(self, include_duration: bool = True) -> Dict[str, Any]:
        data = {"sample_id": self.sample_id, "mode": self.mode, "diagnosis": self.diagnosis.to_dict()}
        if include_duration:
            data["duration_s"] = self.duration_s
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(
            sample_id=data["sample_id"],
            mode=data["mode"],
            diagnosis=Diagnosis.from_dict(data["diagnosis"]),
            duration_s=data.get("duration_s"),
        )


def save_records(records: Sequence[RunRecord], path: PathLike, timings_path: Optional[PathLike] = None) -> None:
    """
    Writes run records as JSONL. Wall-clock durations go to timings_path
    (when given) so the records file itself is reproducible.
    """
    _write_jsonl([record.to_dict(include_duration=False) for record in records], Path(path))
    if timings_path is not None:
        _write_jsonl([
            {"sample_id": r.sample_id, "mode": r.mode, "duration_s": r.duration_s} for r in records
        ], Path(timings_path))


def load_records(path: PathLike) -> List[RunRecord]:
    """
    Reads run records written by save_records.

    Raises:
        ParseError: for a malformed line (with its line number).
    """
    records = []
    for line_num, row in _read_lines(Path(path)):
        try:
            records.append(RunRecord.from_dict(row))
        except (KeyError, TypeError, ValidationError) as err:
            raise ParseError(f"Not a run record: {err}", lines=[line_num]) from err
    return records


@dataclass(frozen=True)
class MetricConfig:
    seed: int
    n_boot: int = metrics.DEFAULT_BOOTSTRAP_SAMPLES
    alpha: float = metrics.DEFAULT_ALPHA


@dataclass(frozen=True)
class MetricEstimate:
    point: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class EvalReport:
    """
    Scores of one run over one dataset.

    Each metric carries its full-data point and a percentile-bootstrap
    interval. Where the raw percentiles from metrics.bootstrap_ci leave the
    point outside, the interval is widened to reach it, so every estimate
    satisfies ci_low <= point <= ci_high.
    """
    dataset: str
    mode: str
    n: int
    metrics: Dict[str, MetricEstimate]
    seed: int
    n_boot: int
    alpha: float = metrics.DEFAULT_ALPHA

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dataset": self.dataset,
            "mode": self.mode,
            "n": self.n,
            "metrics": {
                name: {"point": est.point, "ci_low": est.ci_low, "ci_high": est.ci_high}
                for name, est in self.metrics.items()
            },
            "seed": self.seed,
            "B": self.n_boot,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EvalReport":
        return cls(
            dataset=data["dataset"],
            mode=data["mode"],
            n=data["n"],
            metrics={name: MetricEstimate(**value) for name, value in data["metrics"].items()},
            seed=data["seed"],
            n_boot=data["B"],
        )


Pair = Tuple[Sample, Diagnosis]
Statistic = Callable[[Sequence[Pair]], float]


def _single(labels: Optional[Tuple[int, ...]]) -> Optional[int]:
    return labels[0] if labels and len(labels) == 1 else None


def _mean(values: Sequence[float]) -> float:
    return sum(values) / len(values)


def _metric_family(manifest: DatasetManifest) -> Dict[str, Statistic]:
    task = manifest.task
    label_set = manifest.label_set

    if task is TaskKind.CLS_BINARY:
        return {
            "accuracy": lambda pairs: metrics.accuracy(
                [s.truth_labels[0] for s, _ in pairs], [_single(d.predicted_labels) for _, d in pairs]),
        }
    if task.is_classification:
        def f1(mode: str) -> Statistic:
            return lambda pairs: metrics.aggregate_f1(
                [s.truth_labels for s, _ in pairs], [d.predicted_labels for _, d in pairs], label_set, mode)
        return {"macro_f1": f1("macro"), "micro_f1": f1("micro")}

    if task.is_vqa:
        closed = task is TaskKind.VQA_CLOSED

        def vqa(field: str) -> Statistic:
            def statistic(pairs: Sequence[Pair]) -> float:
                scores = [metrics.score_vqa_item(d.generated_text, s.reference_text, closed) for s, d in pairs]
                if field == "accuracy":
                    return _mean([float(x.closed_correct if closed else x.open_correct) for x in scores])
                return _mean([getattr(x, field) for x in scores])
            return statistic
        return {name: vqa(name) for name in ("accuracy", "precision", "recall", "f1")}

    return {
        "bleu1": lambda pairs: _mean([metrics.bleu1(d.generated_text, s.reference_text)[0] for s, d in pairs]),
        "rouge1": lambda pairs: _mean([metrics.rouge1(d.generated_text, s.reference_text) for s, d in pairs]),
        "rouge_l": lambda pairs: _mean([metrics.rouge_l(d.generated_text, s.reference_text)[0] for s, d in pairs]),
        "meteor": lambda pairs: _mean([metrics.meteor_lite([d.generated_text], [s.reference_text]) for s, d in pairs]),
    }


def _pair_records(records: Sequence[RunRecord], manifest: DatasetManifest) -> List[Pair]:
    samples = manifest.sample_index()
    modes = {record.mode for record in records}
    if len(modes) > 1:
        raise ValidationError(f"Records mix modes {sorted(modes)}; evaluate one mode at a time")

    pairs = []
    seen = set()
    for record in records:
        if record.sample_id not in samples:
            raise ValidationError(f"Record for unknown sample id {record.sample_id!r}")
        if record.sample_id in seen:
            raise ValidationError(f"Two records for sample {record.sample_id!r}")
        seen.add(record.sample_id)
        diagnosis = record.diagnosis
        if manifest.task.is_classification and diagnosis.predicted_labels is None:
            raise ValidationError(f"Record {record.sample_id} has no predicted labels")
        if manifest.task.is_generation and diagnosis.generated_text is None:
            raise ValidationError(f"Record {record.sample_id} has no generated text")
        pairs.append((samples[record.sample_id], diagnosis))
    return pairs


def write_report(
    records: Sequence[RunRecord],
    manifest: DatasetManifest,
    config: MetricConfig,
    output_dir: Optional[PathLike] = None,
) -> EvalReport:
    """
    Scores records with the task's metric family and attaches bootstrap
    confidence intervals. When output_dir is given, writes report.json and
    report.txt there.

    Raises:
        EmptyInputError: if there are no records.
        ValidationError: for an unknown or repeated sample id, or mixed modes.
    """
    if not records:
        raise EmptyInputError("No run records to evaluate")
    pairs = _pair_records(records, manifest)

    estimates = OrderedDict()
    for name, statistic in _metric_family(manifest).items():
        point, low, high = metrics.bootstrap_ci(pairs, statistic, config.n_boot, config.seed, config.alpha)
        estimates[name] = MetricEstimate(point=point, ci_low=min(low, point), ci_high=max(high, point))

    report = EvalReport(
        dataset=manifest.name,
        mode=records[0].mode,
        n=len(pairs),
        metrics=dict(estimates),
        seed=config.seed,
        n_boot=config.n_boot,
        alpha=config.alpha,
    )

    if output_dir is not None:
        output_dir = Path(output_dir)
        save_to_json(report.to_dict(), output_dir / "report.json")
        _write_text(render_report_table(report), output_dir / "report.txt")
    return report


def _write_text(text: str, path: Path) -> None:
    try:
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as err:
        raise StorageError(f"Failed to write {path}: {err}") from err


def _cell(estimate: MetricEstimate) -> str:
    return f"{estimate.point:.4f} ({estimate.ci_low:.4f}, {estimate.ci_high:.4f})"


def render_report_table(report: EvalReport) -> str:
    """Plain-text table: one row per metric, cells 'estimate (ci_low, ci_high)'."""
    level = round(100 * (1 - report.alpha))
    width = max([len("metric")] + [len(name) for name in report.metrics])
    lines = [
        f"dataset: {report.dataset}  mode: {report.mode}  n: {report.n}  B: {report.n_boot}  seed: {report.seed}",
        f"{'metric'.ljust(width)}  estimate ({level}% CI)",
    ]
    for name, estimate in report.metrics.items():
        lines.append(f"{name.ljust(width)}  {_cell(estimate)}")
    return "\n".join(lines) + "\n"


def load_report(path: PathLike) -> EvalReport:
    data = load_from_json(path)
    try:
        return EvalReport.from_dict(data)
    except (KeyError, TypeError) as err:
        raise ValidationError(f"{path} is not a report: {err}") from err


def merge_reports(reports: Sequence[EvalReport]) -> Dict[str, Any]:
    """Comparison document: one row per (dataset, mode), metrics side by side."""
    if not reports:
        raise EmptyInputError("No reports to merge")
    names = sorted({name for report in reports for name in report.metrics})
    rows = []
    for report in sorted(reports, key=lambda r: (r.dataset, MODES.index(r.mode) if r.mode in MODES else len(MODES), r.mode)):
        rows.append({
            "dataset": report.dataset,
            "mode": report.mode,
            "n": report.n,
            "metrics": {name: report.to_dict()["metrics"].get(name) for name in names},
        })
    return {"metrics": names, "rows": rows}


def render_comparison(reports: Sequence[EvalReport]) -> str:
    """Plain-text comparison table of several reports."""
    merged = merge_reports(reports)
    header = ["dataset", "mode", "n"] + merged["metrics"]
    table = [header]
    for row in merged["rows"]:
        cells = [row["dataset"], row["mode"], str(row["n"])]
        for name in merged["metrics"]:
            value = row["metrics"][name]
            cells.append(_cell(MetricEstimate(**value)) if value else "-")
        table.append(cells)
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in table) + "\n"
