import json
import threading
from collections import Counter
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pytest

from domain_model import LabelSet, Sample, SpecialistPrediction, TaskKind
from exceptions import BackendError

BINARY_LABELS = ["Negative", "Positive"]
SPECIALIST_COUNT = 10
EMBED_DIMENSION = 4
TIED_SAMPLE = "s20"


def write_jsonl(path: Path, rows: Sequence[Dict[str, Any]]) -> Path:
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row))
            f.write("\n")
    return path


def write_json(path: Path, data: Any) -> Path:
    path.write_text(json.dumps(data, indent=2), encoding="utf-8")
    return path


def stub_backend(backend_id: str, capability: str, table: Dict[str, Any], **extra) -> Dict[str, Any]:
    descriptor = {
        "backend_id": backend_id,
        "capability": capability,
        "transport": {"kind": "stub", "table": table},
    }
    descriptor.update(extra)
    return descriptor


class TableSpecialist:
    """In-process predict backend answering from a dict of display labels."""

    def __init__(self, backend_id: str, answers: Dict[str, Sequence[str]], fail_on: Sequence[str] = ()):
        self.backend_id = backend_id
        self.answers = answers
        self.fail_on = set(fail_on)

    def predict(self, image_ref: str, labels: LabelSet) -> SpecialistPrediction:
        if image_ref in self.fail_on:
            raise BackendError(f"{self.backend_id} is down")
        indices = tuple(labels.index_of(text) for text in self.answers[image_ref])
        return SpecialistPrediction(specialist_id=self.backend_id, labels=indices)


class FixedEmbedder:
    backend_id = "embedder"

    def __init__(self, vectors: Dict[str, Sequence[float]]):
        self.vectors = vectors

    def embed(self, image_ref: str):
        return np.asarray(self.vectors[image_ref], dtype=np.float64)


def _context_line(prompt: str, marker: str) -> Optional[List[str]]:
    for line in prompt.split("\n"):
        if marker in line:
            context = line.split(marker, 1)[1].rstrip(".")
            if context == "none":
                return None
            return context.split(", ")
    return None


class MoedEchoGenerator:
    """Answers with the first label of the prompt's specialist block."""
    backend_id = "gfm-moed-echo"

    def __init__(self):
        self.prompts: List[str] = []

    def generate(self, image_ref: str, prompt: str) -> str:
        self.prompts.append(prompt)
        answers = _context_line(prompt, "reference answers by other models are ")
        return answers[0] if answers else "inconclusive"


class RadModeGenerator:
    """Answers with the most frequent label of the prompt's retrieval block."""
    backend_id = "gfm-rad-mode"

    def __init__(self):
        self.prompts: List[str] = []

    def generate(self, image_ref: str, prompt: str) -> str:
        self.prompts.append(prompt)
        labels = _context_line(prompt, "most similar cases are ")
        return Counter(labels).most_common(1)[0][0] if labels else "inconclusive"


class FixedGenerator:
    def __init__(self, text: str, backend_id: str = "gfm-fixed"):
        self.backend_id = backend_id
        self.text = text
        self.prompts: List[str] = []

    def generate(self, image_ref: str, prompt: str) -> str:
        self.prompts.append(prompt)
        return self.text


class FailingGenerator:
    backend_id = "gfm-down"

    def generate(self, image_ref: str, prompt: str) -> str:
        raise BackendError("generalist unreachable")


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    """Keeps local settings and proxies out of every test."""
    for name in ("GSCO_HTTP_TIMEOUT_SECS", "GSCO_LOG_LEVEL", "GSCO_MAX_CONCURRENCY", "GSCO_TEMPLATES_DIR"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv("NO_PROXY", "127.0.0.1,localhost")
    monkeypatch.setenv("no_proxy", "127.0.0.1,localhost")


@pytest.fixture
def binary_labels() -> LabelSet:
    return LabelSet.from_names(BINARY_LABELS)


@pytest.fixture
def binary_sample() -> Sample:
    return Sample(id="x1", image_ref="img/x1.png", modality="chest X-ray",
                  task=TaskKind.CLS_BINARY, truth_labels=(1,))


def _binary_rows() -> List[Dict[str, Any]]:
    rows = []
    for i in range(1, 21):
        rows.append({
            "id": f"s{i:02d}" if i < 20 else TIED_SAMPLE,
            "image": f"img/{i:02d}.png",
            "modality": "pathology",
            "labels": [BINARY_LABELS[i % 2 if i < 20 else 1]],
        })
    return rows


def _specialist_answers(rows: Sequence[Dict[str, Any]]) -> List[Dict[str, str]]:
    """Seven of ten specialists are right on every sample except the tied one, which splits 5-5."""
    tables = [{} for _ in range(SPECIALIST_COUNT)]
    for row in rows:
        truth = row["labels"][0]
        wrong = BINARY_LABELS[1 - BINARY_LABELS.index(truth)]
        right_count = 5 if row["id"] == TIED_SAMPLE else 7
        for k, table in enumerate(tables):
            table[row["image"]] = [truth] if k < right_count else [wrong]
    return tables


@pytest.fixture
def binary_dataset(tmp_path: Path) -> Dict[str, Path]:
    """
    Twenty binary samples, ten stub specialists and a generalist that
    always names the truth. Voting gets the tied sample wrong.
    """
    rows = _binary_rows()
    manifest = write_jsonl(
        tmp_path / "manifest.jsonl",
        [{"name": "toy-binary", "task": "cls-binary", "label_set": BINARY_LABELS}] + rows,
    )

    backends = [stub_backend("gfm", "generate", {row["image"]: f"{row['labels'][0]}." for row in rows})]
    for k, table in enumerate(_specialist_answers(rows)):
        backends.append(stub_backend(f"spec{k}", "predict", table))
    vectors = {
        row["image"]: [1.0, float(i % 5), float(i % 3), 0.5 * (i % 2)]
        for i, row in enumerate(rows, 1)
    }
    backends.append(stub_backend("retriever", "embed", vectors, dimension=EMBED_DIMENSION))
    backend_file = write_json(tmp_path / "backends.json", {"backends": backends})
    return {"manifest": manifest, "backends": backend_file, "dir": tmp_path}


class _LoopbackHandler(BaseHTTPRequestHandler):
    def log_message(self, format, *args):
        pass

    def _reply(self, status: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        length = int(self.headers.get("Content-Length", 0))
        request = json.loads(self.rfile.read(length) or b"{}")
        self.server.requests.append((self.path, request))

        if self.path.startswith("/broken/"):
            self._reply(500, b'{"error": "boom"}')
            return
        if self.path.startswith("/garbled/"):
            self._reply(200, b"<html>not json</html>", "text/html")
            return

        route = self.path.rsplit("/", 1)[-1]
        if route == "generate":
            body = {"text": request["prompt"].split("\n")[-1]}
        elif route == "predict":
            body = {"labels": [request["label_set"][-1]], "scores": [0.91]}
        elif route == "embed":
            body = {"vector": [0.1, 0.2]}
        else:
            self._reply(404, b"{}")
            return
        self._reply(200, json.dumps(body).encode("utf-8"))


@pytest.fixture
def loopback_server():
    """A local HTTP server speaking the backend wire protocol."""
    server = ThreadingHTTPServer(("127.0.0.1", 0), _LoopbackHandler)
    server.requests = []
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    host, port = server.server_address
    server.base_url = f"http://{host}:{port}"
    yield server
    server.shutdown()
    server.server_close()
    thread.join()
