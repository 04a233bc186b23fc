"""
This module gives uniform access to the three model capabilities the
engine needs: generate (the generalist), predict (specialist classifiers)
and embed (the retriever).

A backend is reached either over HTTP (JSON POST, see below) or through
an in-process stub lookup table. Both transports return the same payload
shape, which then goes through the same validation.

Wire protocol (UTF-8 JSON bodies):
    POST /v1/generate  {"image_ref", "prompt"}     -> {"text"}
    POST /v1/predict   {"image_ref", "label_set"}  -> {"labels", "scores"?}
    POST /v1/embed     {"image_ref"}               -> {"vector"}

Classes:
    Capability, RemoteTransport, StubTransport, BackendDescriptor,
    Backend, BackendRegistry

Functions:
    parse_prediction(text, labels, task) -> (labels, parse_warning)
    load_backends(path, settings) -> BackendRegistry
"""

import json
import logging
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union
from urllib.parse import urlparse

import numpy as np
import requests
import requests.exceptions

from domain_model import LabelSet, SpecialistPrediction, TaskKind, normalize_label
from exceptions import BackendError, ConfigError, ProtocolError, ValidationError
from utils import DEFAULT_MAX_CONCURRENCY, Settings, load_from_json

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0
DEFAULT_RETRIES = 1


class Capability(Enum):
    GENERATE = "generate"
    PREDICT = "predict"
    EMBED = "embed"


@dataclass(frozen=True)
class RemoteTransport:
    """An HTTP endpoint serving the wire protocol."""
    endpoint: str
    timeout: float = DEFAULT_TIMEOUT
    retries: int = DEFAULT_RETRIES
    headers: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        parsed = urlparse(self.endpoint)
        if parsed.scheme not in ("http", "https") or not parsed.netloc:
            raise ConfigError(f"Backend endpoint must be an absolute http(s) URL, got {self.endpoint!r}")
        if not self.timeout > 0:
            raise ConfigError(f"Backend timeout must be positive, got {self.timeout!r}")
        if not isinstance(self.retries, int) or self.retries < 0:
            raise ConfigError(f"Backend retry count must be a non-negative integer, got {self.retries!r}")


@dataclass(frozen=True)
class StubTransport:
    """A lookup table keyed by image_ref."""
    table: Mapping[str, Any]


Transport = Union[RemoteTransport, StubTransport]


@dataclass(frozen=True)
class BackendDescriptor:
    backend_id: str
    capability: Capability
    transport: Transport
    dimension: Optional[int] = None
    max_concurrency: int = DEFAULT_MAX_CONCURRENCY

    def __post_init__(self) -> None:
        if not self.backend_id:
            raise ConfigError("backend_id must not be empty")
        if self.capability is Capability.EMBED:
            if not isinstance(self.dimension, int) or self.dimension < 1:
                raise ConfigError(f"Embed backend {self.backend_id} must declare a positive dimension")
        if not isinstance(self.max_concurrency, int) or self.max_concurrency < 1:
            raise ConfigError(f"Backend {self.backend_id}: max_concurrency must be at least 1")


class Backend:
    """
    Client for one backend. Thread-safe; at most max_concurrency requests
    are in flight at once.
    """

    def __init__(self, descriptor: BackendDescriptor):
        self.descriptor = descriptor
        self._slots = threading.BoundedSemaphore(descriptor.max_concurrency)

    @property
    def backend_id(self) -> str:
        return self.descriptor.backend_id

    @property
    def capability(self) -> Capability:
        return self.descriptor.capability

    def _require(self, capability: Capability) -> None:
        if self.capability is not capability:
            raise ConfigError(
                f"Backend {self.backend_id} has capability {self.capability.value}, not {capability.value}"
            )

    def _stub_payload(self, image_ref: str) -> Dict[str, Any]:
        table = self.descriptor.transport.table
        if image_ref not in table:
            raise BackendError(f"Stub backend {self.backend_id} has no entry for {image_ref!r}")
        value = table[image_ref]
        if self.capability is Capability.GENERATE:
            return {"text": value}
        if self.capability is Capability.EMBED:
            return {"vector": value}
        if isinstance(value, dict):
            return dict(value)
        return {"labels": value}

    def _post(self, route: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        transport = self.descriptor.transport
        url = f"{transport.endpoint.rstrip('/')}/v1/{route}"
        logger.debug("Request to %s (%s): %s", self.backend_id, url, json.dumps(payload, ensure_ascii=False))

        last_error: Optional[Exception] = None
        for attempt in range(transport.retries + 1):
            started = time.perf_counter()
            try:
                response = requests.post(url, json=payload, headers=dict(transport.headers), timeout=transport.timeout)
            except (requests.exceptions.ConnectionError, requests.exceptions.Timeout) as err:
                last_error = err
                logger.warning(
                    "Transport error from %s on attempt %d/%d: %s",
                    self.backend_id, attempt + 1, transport.retries + 1, err,
                )
                continue
            except requests.exceptions.RequestException as err:
                raise BackendError(f"Request to {self.backend_id} failed: {err}") from err

            logger.info("%s answered %s in %.1f ms", self.backend_id, route, (time.perf_counter() - started) * 1000)
            if response.status_code != 200:
                raise ProtocolError(f"{self.backend_id} returned HTTP {response.status_code}")
            try:
                body = response.json()
            except ValueError as err:
                raise ProtocolError(f"{self.backend_id} returned a non-JSON body") from err
            if not isinstance(body, dict):
                raise ProtocolError(f"{self.backend_id} returned {type(body).__name__}, expected an object")
            return body

        raise BackendError(
            f"{self.backend_id} unreachable after {transport.retries + 1} attempts: {last_error}"
        )

    def _call(self, route: str, payload: Dict[str, Any]) -> Dict[str, Any]:
        with self._slots:
            if isinstance(self.descriptor.transport, StubTransport):
                started = time.perf_counter()
                body = self._stub_payload(payload["image_ref"])
                logger.info(
                    "%s answered %s from its stub table in %.1f ms",
                    self.backend_id, route, (time.perf_counter() - started) * 1000,
                )
                return body
            return self._post(route, payload)

    def generate(self, image_ref: str, prompt: str) -> str:
        """
        Asks the generalist for text.

        Raises:
            BackendError: transport failure after retries, or a missing stub entry.
            ProtocolError: malformed response.
        """
        self._require(Capability.GENERATE)
        body = self._call("generate", {"image_ref": image_ref, "prompt": prompt})
        text = body.get("text")
        if not isinstance(text, str):
            raise ProtocolError(f"{self.backend_id} response lacks a string 'text' field")
        return text

    def predict(self, image_ref: str, labels: LabelSet) -> SpecialistPrediction:
        """
        Asks a specialist for its labels over the given label set.

        Raises:
            ProtocolError: if a returned label is outside the set, or scores are malformed.
            BackendError: transport failure.
        """
        self._require(Capability.PREDICT)
        body = self._call("predict", {"image_ref": image_ref, "label_set": list(labels.labels)})
        raw_labels = body.get("labels")
        if not isinstance(raw_labels, list) or not all(isinstance(item, str) for item in raw_labels):
            raise ProtocolError(f"{self.backend_id} response lacks a 'labels' list of strings")

        indices = []
        for text in raw_labels:
            index = labels.index_of(text)
            if index is None:
                raise ProtocolError(f"{self.backend_id} returned label {text!r} outside the label set")
            if index in indices:
                raise ProtocolError(f"{self.backend_id} returned label {text!r} twice")
            indices.append(index)

        scores = body.get("scores")
        if scores is not None:
            if (not isinstance(scores, list)
                    or not all(isinstance(s, (int, float)) and not isinstance(s, bool) for s in scores)):
                raise ProtocolError(f"{self.backend_id} returned non-numeric scores")
            if len(scores) != len(indices):
                raise ProtocolError(f"{self.backend_id} returned {len(scores)} scores for {len(indices)} labels")
            if any(not 0.0 <= s <= 1.0 for s in scores):
                raise ProtocolError(f"{self.backend_id} returned scores outside [0, 1]")
            scores = tuple(float(s) for s in scores)

        return SpecialistPrediction(specialist_id=self.backend_id, labels=tuple(indices), scores=scores)

    def embed(self, image_ref: str) -> np.ndarray:
        """
        Asks the retriever for the image embedding.

        Raises:
            ProtocolError: for NaN/Inf values or a dimension other than the declared one.
            BackendError: transport failure.
        """
        self._require(Capability.EMBED)
        body = self._call("embed", {"image_ref": image_ref})
        vector = body.get("vector")
        if (not isinstance(vector, (list, tuple))
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vector)):
            raise ProtocolError(f"{self.backend_id} response lacks a numeric 'vector' list")
        if len(vector) != self.descriptor.dimension:
            raise ProtocolError(
                f"{self.backend_id} returned dimension {len(vector)}, declared {self.descriptor.dimension}"
            )
        if not all(math.isfinite(v) for v in vector):
            raise ProtocolError(f"{self.backend_id} returned NaN or infinite values")
        return np.asarray(vector, dtype=np.float64)


def parse_prediction(text: str, labels: LabelSet, task: TaskKind) -> Tuple[Tuple[int, ...], bool]:
    """
    Maps free-form generator text onto the label set.

    Strategies, in order: exact normalized match; the single label whose
    normalized form occurs in the text; the longest such label (earlier
    label wins a length tie). Multilabel tasks return every label whose
    normalized form occurs in the normalized text.

    Returns:
        (label indices, parse_warning); the warning is set when nothing matched.
    """
    if not task.is_classification:
        raise ValidationError(f"parse_prediction applies to classification tasks, not {task.value}")

    exact = labels.index_of(text)
    if exact is not None:
        return (exact,), False

    haystack = normalize_label(text)
    found = [index for index, needle in enumerate(labels.normalized) if needle in haystack]
    if not found:
        return (), True

    if task.is_single_label:
        best = max(found, key=lambda i: (len(labels.normalized[i]), -i))
        return (best,), False
    return tuple(found), False


@dataclass
class BackendRegistry:
    """The backends of one run, grouped by role."""
    generalist: Optional[Backend] = None
    specialists: List[Backend] = field(default_factory=list)
    embedder: Optional[Backend] = None

    def specialist(self, backend_id: str) -> Backend:
        for backend in self.specialists:
            if backend.backend_id == backend_id:
                return backend
        raise ConfigError(f"No specialist named {backend_id!r}")


def _transport(spec: Mapping[str, Any], base_dir: Path, settings: Settings) -> Transport:
    kind = spec.get("kind")
    if kind == "stub":
        if "table" in spec:
            table = spec["table"]
        elif "table_path" in spec:
            table_path = Path(spec["table_path"])
            table = load_from_json(table_path if table_path.is_absolute() else base_dir / table_path)
        else:
            raise ConfigError("Stub transport needs 'table' or 'table_path'")
        if not isinstance(table, dict):
            raise ConfigError("Stub table must be a JSON object keyed by image_ref")
        return StubTransport(table=table)
    if kind == "remote":
        timeout = settings.http_timeout or spec.get("timeout", DEFAULT_TIMEOUT)
        return RemoteTransport(
            endpoint=spec.get("endpoint", ""),
            timeout=timeout,
            retries=spec.get("retries", DEFAULT_RETRIES),
            headers=dict(spec.get("headers", {})),
        )
    raise ConfigError(f"Unknown transport kind {kind!r}")


def load_backends(path: Union[str, Path], settings: Optional[Settings] = None) -> BackendRegistry:
    """
    Reads a backend descriptor file.

    The file is {"backends": [descriptor, ...]}. The generate backend
    becomes the generalist, predict backends the specialist panel (in
    listed order) and the embed backend the retriever.

    Raises:
        ConfigError: for malformed descriptors, duplicate ids, or more than
            one generalist or retriever.
    """
    settings = settings or Settings()
    path = Path(path)
    document = load_from_json(path)
    if not isinstance(document, dict) or not isinstance(document.get("backends"), list):
        raise ConfigError(f"{path} must hold an object with a 'backends' list")

    registry = BackendRegistry()
    seen = set()
    for raw in document["backends"]:
        if not isinstance(raw, dict):
            raise ConfigError("Each backend descriptor must be an object")
        try:
            capability = Capability(raw.get("capability"))
        except ValueError as err:
            raise ConfigError(f"Unknown capability {raw.get('capability')!r}") from err
        descriptor = BackendDescriptor(
            backend_id=raw.get("backend_id", ""),
            capability=capability,
            transport=_transport(raw.get("transport", {}), path.parent, settings),
            dimension=raw.get("dimension"),
            max_concurrency=raw.get("max_concurrency", settings.max_concurrency),
        )
        if descriptor.backend_id in seen:
            raise ConfigError(f"Duplicate backend id {descriptor.backend_id!r}")
        seen.add(descriptor.backend_id)

        backend = Backend(descriptor)
        if capability is Capability.GENERATE:
            if registry.generalist is not None:
                raise ConfigError("Only one generate backend may be configured")
            registry.generalist = backend
        elif capability is Capability.EMBED:
            if registry.embedder is not None:
                raise ConfigError("Only one embed backend may be configured")
            registry.embedder = backend
        else:
            registry.specialists.append(backend)

    logger.info(
        "Loaded %d backends from %s (%d specialists).", len(seen), path, len(registry.specialists)
    )
    return registry
