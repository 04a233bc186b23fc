# main.py

"""
Command-line entry point.

Subcommands:
    build-index  embed every manifest sample and write the retrieval index
    infer        run one mode over a manifest and write run records
    evaluate     score run records and write a report with confidence intervals
    report       merge several reports into one comparison table
    dgb          write diagnosis-guided bootstrapping prompts for a manifest

Exit codes: 0 success, 1 validation error, 2 runtime error.
Every run writes run_config.json into --output-dir so it can be replayed.
"""

# Standard library imports
import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

# Local application imports
from backend_gateway import load_backends
from collaboration import InferenceRunner, Mode
from corpus import (
    MetricConfig,
    build_dgb_prompts,
    load_manifest,
    load_records,
    load_report,
    merge_reports,
    render_comparison,
    save_dgb_prompts,
    save_records,
    write_report,
)
from exceptions import ConfigError, GscoError, ValidationError
from metrics import DEFAULT_BOOTSTRAP_SAMPLES
from utils import Settings, fetch_environment_variables, init_logging, save_to_json
from vector_index import DEFAULT_K, IndexEntry, RetrievalConfig, build_index, load_index, save_index

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

DEFAULT_WORKERS = 4

logger = logging.getLogger("gsco")


class UsageParser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with the validation exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _output_file(output_dir: Path, name: str) -> Path:
    if Path(name).name != name or name in ("", ".", ".."):
        raise ConfigError(f"{name!r} must be a plain file name inside --output-dir")
    return output_dir / name


def cmd_build_index(args: argparse.Namespace, settings: Settings) -> None:
    manifest = load_manifest(args.manifest)
    registry = load_backends(args.backends, settings)
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    if registry.embedder is None:
        raise ConfigError("build-index needs an embed backend")
    index_path = _output_file(args.output_dir, args.index_name)
    embedder = registry.embedder
    label_set = manifest.label_set

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        vectors = list(pool.map(lambda s: embedder.embed(s.image_ref), manifest.samples))

    entries = [
        IndexEntry(
            entry_id=sample.id,
            vector=tuple(vector.tolist()),
            meta_labels=tuple(label_set.displays(sample.truth_labels)) if sample.truth_labels is not None else None,
            meta_text=sample.reference_text,
            modality=sample.modality,
        )
        for sample, vector in zip(manifest.samples, vectors)
    ]
    save_index(build_index(entries, embedder.descriptor.dimension), index_path)


def cmd_infer(args: argparse.Namespace, settings: Settings) -> None:
    mode = Mode(args.mode)
    if mode.needs_retrieval and args.index is None:
        raise ConfigError(f"--mode {mode.value} requires --index")

    manifest = load_manifest(args.manifest)
    registry = load_backends(args.backends, settings)
    index = load_index(args.index) if mode.needs_retrieval else None

    runner = InferenceRunner(
        mode,
        registry,
        manifest.label_set,
        manifest.task,
        index=index,
        retrieval=RetrievalConfig(k=args.k),
        variant=args.variant,
        workers=args.workers,
        exclude_self=args.exclude_self,
        specialist_id=args.specialist,
    )
    records = runner.run(manifest.samples)
    save_records(records, args.output_dir / "records.jsonl", args.output_dir / "timings.jsonl")
    logger.info("Wrote %d records to %s.", len(records), args.output_dir)


def cmd_evaluate(args: argparse.Namespace, settings: Settings) -> None:
    manifest = load_manifest(args.manifest)
    records = load_records(args.records)
    report = write_report(records, manifest, MetricConfig(seed=args.seed, n_boot=args.boot), args.output_dir)
    for name, estimate in report.metrics.items():
        logger.info("%s %s: %.4f (%.4f, %.4f)", report.mode, name, estimate.point, estimate.ci_low, estimate.ci_high)


def cmd_report(args: argparse.Namespace, settings: Settings) -> None:
    reports = [load_report(path) for path in args.reports]
    save_to_json(merge_reports(reports), args.output_dir / "comparison.json")
    text = render_comparison(reports)
    (args.output_dir / "comparison.txt").write_text(text, encoding="utf-8", newline="\n")


def cmd_dgb(args: argparse.Namespace, settings: Settings) -> None:
    manifest = load_manifest(args.manifest)
    prompts = build_dgb_prompts(manifest)
    save_dgb_prompts(prompts, args.output_dir / "dgb_prompts.jsonl")
    logger.info("Wrote %d DGB prompts.", len(prompts))


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="gsco", description="Generalist-specialist collaborative inference.")
    parser.add_argument("--log-level", default=None, help="logging level (default: GSCO_LOG_LEVEL or INFO)")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--output-dir", type=Path, required=True, help="directory for every file the run writes")

    build = subparsers.add_parser("build-index", help="embed a manifest and write an index")
    build.add_argument("--manifest", type=Path, required=True)
    build.add_argument("--backends", type=Path, required=True)
    build.add_argument("--index-name", default="index.gsco")
    build.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    common(build)
    build.set_defaults(handler=cmd_build_index)

    infer = subparsers.add_parser("infer", help="run one mode over a manifest")
    infer.add_argument("--manifest", type=Path, required=True)
    infer.add_argument("--mode", choices=[mode.value for mode in Mode], required=True)
    infer.add_argument("--backends", type=Path, required=True)
    infer.add_argument("--index", type=Path, default=None)
    infer.add_argument("--k", type=int, default=DEFAULT_K)
    infer.add_argument("--variant", type=int, default=0, help="GSCo instruction variant, 0-3")
    infer.add_argument("--workers", type=int, default=DEFAULT_WORKERS)
    infer.add_argument("--exclude-self", action="store_true", help="leave the query sample out of retrieval")
    infer.add_argument("--specialist", default=None, help="specialist backend id for --mode specialist")
    common(infer)
    infer.set_defaults(handler=cmd_infer)

    evaluate = subparsers.add_parser("evaluate", help="score run records")
    evaluate.add_argument("--manifest", type=Path, required=True)
    evaluate.add_argument("--records", type=Path, required=True)
    evaluate.add_argument("--seed", type=int, required=True)
    evaluate.add_argument("--boot", type=int, default=DEFAULT_BOOTSTRAP_SAMPLES, help="bootstrap resamples (B)")
    common(evaluate)
    evaluate.set_defaults(handler=cmd_evaluate)

    report = subparsers.add_parser("report", help="merge reports into one comparison table")
    report.add_argument("--reports", type=Path, nargs="+", required=True)
    common(report)
    report.set_defaults(handler=cmd_report)

    dgb = subparsers.add_parser("dgb", help="write diagnosis-guided bootstrapping prompts")
    dgb.add_argument("--manifest", type=Path, required=True)
    common(dgb)
    dgb.set_defaults(handler=cmd_dgb)

    return parser


def _config_echo(args: argparse.Namespace) -> dict:
    echo = {}
    for key, value in sorted(vars(args).items()):
        if key == "handler":
            continue
        if isinstance(value, Path):
            value = str(value)
        elif isinstance(value, list):
            value = [str(item) for item in value]
        echo[key] = value
    return echo


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parses argv, runs the subcommand and returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_OK

    try:
        settings = fetch_environment_variables()
    except ConfigError as err:
        init_logging()
        logger.error("%s", err)
        return EXIT_VALIDATION
    level = (args.log_level or settings.log_level).upper()
    if not isinstance(logging.getLevelName(level), int):
        init_logging()
        logger.error("Unknown log level %r", level)
        return EXIT_VALIDATION
    init_logging(level)

    try:
        args.output_dir.mkdir(parents=True, exist_ok=True)
        save_to_json(_config_echo(args), args.output_dir / "run_config.json")
        args.handler(args, settings)
    except ValidationError as err:
        logger.error("Validation error: %s", err)
        return EXIT_VALIDATION
    except GscoError as err:
        logger.error("Runtime error: %s", err)
        return EXIT_RUNTIME
    except OSError as err:
        logger.error("Runtime error: %s", err)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
