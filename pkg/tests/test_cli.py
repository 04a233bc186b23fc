import json
import socket

import pytest

from main import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, dispatch
from tests.conftest import write_json


def _free_port():
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def _build_index(dataset, output_dir):
    code = dispatch([
        "build-index", "--manifest", str(dataset["manifest"]), "--backends", str(dataset["backends"]),
        "--output-dir", str(output_dir),
    ])
    assert code == EXIT_OK
    return output_dir / "index.gsco"


def _infer(dataset, mode, output_dir, *extra):
    return dispatch([
        "infer", "--manifest", str(dataset["manifest"]), "--backends", str(dataset["backends"]),
        "--mode", mode, "--output-dir", str(output_dir), *extra,
    ])


def _evaluate(dataset, records, output_dir, seed=7):
    return dispatch([
        "evaluate", "--manifest", str(dataset["manifest"]), "--records", str(records),
        "--seed", str(seed), "--boot", "200", "--output-dir", str(output_dir),
    ])


def _accuracy(report_dir):
    return json.loads((report_dir / "report.json").read_text(encoding="utf-8"))["metrics"]["accuracy"]["point"]


def test_gsco_runs_are_byte_identical(binary_dataset, tmp_path):
    index = _build_index(binary_dataset, tmp_path / "index")
    for run in ("run1", "run2"):
        assert _infer(binary_dataset, "gsco", tmp_path / run, "--index", str(index), "--workers", "3") == EXIT_OK
        assert _evaluate(binary_dataset, tmp_path / run / "records.jsonl", tmp_path / run / "eval") == EXIT_OK

    for name in ("records.jsonl", "eval/report.json", "eval/report.txt"):
        assert (tmp_path / "run1" / name).read_bytes() == (tmp_path / "run2" / name).read_bytes()
    assert (tmp_path / "run1" / "timings.jsonl").exists()


def test_gsco_breaks_the_tie_that_voting_misses(binary_dataset, tmp_path):
    index = _build_index(binary_dataset, tmp_path / "index")
    assert _infer(binary_dataset, "gsco", tmp_path / "gsco", "--index", str(index)) == EXIT_OK
    assert _infer(binary_dataset, "voting", tmp_path / "voting") == EXIT_OK
    for mode in ("gsco", "voting"):
        assert _evaluate(binary_dataset, tmp_path / mode / "records.jsonl", tmp_path / mode) == EXIT_OK

    assert _accuracy(tmp_path / "voting") == pytest.approx(0.95)
    assert _accuracy(tmp_path / "gsco") == 1.0
    assert _accuracy(tmp_path / "gsco") >= _accuracy(tmp_path / "voting")

    code = dispatch(["report", "--reports", str(tmp_path / "gsco" / "report.json"),
                     str(tmp_path / "voting" / "report.json"), "--output-dir", str(tmp_path / "cmp")])
    assert code == EXIT_OK
    assert "voting" in (tmp_path / "cmp" / "comparison.txt").read_text(encoding="utf-8")
    assert (tmp_path / "cmp" / "comparison.json").exists()


def test_rad_mode_reads_built_index(binary_dataset, tmp_path):
    index = _build_index(binary_dataset, tmp_path / "index")
    code = _infer(binary_dataset, "rad", tmp_path / "rad", "--index", str(index), "--k", "3", "--exclude-self")
    assert code == EXIT_OK
    rows = [json.loads(line) for line in (tmp_path / "rad" / "records.jsonl").read_text().splitlines()]
    assert len(rows) == 20
    assert all(len(row["diagnosis"]["context_rad"].split(", ")) == 3 for row in rows)
    assert all(row["diagnosis"]["context_moed"] is None for row in rows)


def test_run_config_is_written(binary_dataset, tmp_path):
    assert _infer(binary_dataset, "voting", tmp_path / "out", "--workers", "2") == EXIT_OK
    config = json.loads((tmp_path / "out" / "run_config.json").read_text(encoding="utf-8"))
    assert config["command"] == "infer"
    assert config["mode"] == "voting"
    assert config["workers"] == 2
    assert config["manifest"] == str(binary_dataset["manifest"])


def test_dgb_command(binary_dataset, tmp_path):
    assert dispatch(["dgb", "--manifest", str(binary_dataset["manifest"]), "--output-dir", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "dgb_prompts.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 20
    assert "the diagnosis is Positive." in json.loads(lines[0])["prompt"]
    assert json.loads(lines[0])["instruction"].endswith("outlines the final diagnosis.")


def test_usage_error_exits_with_validation_code(tmp_path):
    assert dispatch(["infer", "--mode", "gsco"]) == EXIT_VALIDATION
    assert dispatch(["no-such-command"]) == EXIT_VALIDATION


def test_retrieval_mode_without_index(binary_dataset, tmp_path):
    assert _infer(binary_dataset, "gsco", tmp_path / "out") == EXIT_VALIDATION


def test_invalid_variant(binary_dataset, tmp_path):
    index = _build_index(binary_dataset, tmp_path / "index")
    assert _infer(binary_dataset, "gsco", tmp_path / "out", "--index", str(index), "--variant", "7") == EXIT_VALIDATION


def test_invalid_log_level(binary_dataset, tmp_path):
    assert dispatch(["--log-level", "LOUD", "dgb", "--manifest", str(binary_dataset["manifest"]),
                     "--output-dir", str(tmp_path)]) == EXIT_VALIDATION


def test_invalid_environment(binary_dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("GSCO_MAX_CONCURRENCY", "lots")
    assert _infer(binary_dataset, "voting", tmp_path / "out") == EXIT_VALIDATION


def test_missing_manifest_is_a_runtime_error(binary_dataset, tmp_path):
    code = dispatch(["infer", "--manifest", str(tmp_path / "absent.jsonl"), "--backends",
                     str(binary_dataset["backends"]), "--mode", "voting", "--output-dir", str(tmp_path / "out")])
    assert code == EXIT_RUNTIME


def test_corrupt_index_is_a_validation_error(binary_dataset, tmp_path):
    index = tmp_path / "broken.gsco"
    index.write_bytes(b"GSCOIDX1{}")
    assert _infer(binary_dataset, "rad", tmp_path / "out", "--index", str(index)) == EXIT_VALIDATION


def test_unreachable_generalist_is_a_runtime_error(binary_dataset, tmp_path):
    backends = write_json(tmp_path / "remote.json", {"backends": [{
        "backend_id": "gfm",
        "capability": "generate",
        "transport": {"kind": "remote", "endpoint": f"http://127.0.0.1:{_free_port()}", "retries": 0, "timeout": 2},
    }]})
    code = dispatch(["infer", "--manifest", str(binary_dataset["manifest"]), "--backends", str(backends),
                     "--mode", "gfm", "--output-dir", str(tmp_path / "out")])
    assert code == EXIT_RUNTIME
