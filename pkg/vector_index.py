"""
vector_index.py

The retrieval database: (embedding, metadata) entries answered by exact
top-k cosine-similarity scans, persisted in a small binary format.

Classes:
    IndexEntry: one database row.
    RetrievedCase: one ranked hit.
    RetrievalConfig: k and the optional self-exclusion id.
    Index: immutable collection of entries with cached norms.

Functions:
    cosine_similarity(a, b) -> float
    build_index(entries, dimension) -> Index
    query_topk(index, query, cfg) -> List[RetrievedCase]
    save_index(index, path) -> None
    load_index(path) -> Index

Vectors are stored as 32-bit floats; dot products and norms are
accumulated in 64 bits with math.fsum, which makes every similarity
exactly rounded and independent of argument order. Ranked similarities
are further rounded to SIMILARITY_DECIMALS places so that the ulp-level
noise left by rescaling a query cannot reorder entries that tie exactly.

File layout:
    b"GSCOIDX1" | JSON header line terminated by b"\\n" |
    count x dimension little-endian float32 values, row-major, in entry order.
"""

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from exceptions import (
    ConfigError,
    DegenerateVectorError,
    DimensionError,
    DuplicateIdError,
    FormatError,
    StorageError,
)

logger = logging.getLogger(__name__)

MAGIC = b"GSCOIDX1"
FORMAT_VERSION = 1
DEFAULT_K = 5
SIMILARITY_DECIMALS = 12

EmbeddingVector = np.ndarray
VectorLike = Union[Sequence[float], np.ndarray]


def to_embedding(values: VectorLike, dimension: Optional[int] = None) -> EmbeddingVector:
    """
    Converts values into a 1-D float64 embedding.

    Raises:
        DimensionError: if the shape is wrong.
        DegenerateVectorError: if any value is NaN or infinite.
    """
    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1:
        raise DimensionError(f"Embedding must be one-dimensional, got shape {vector.shape}")
    if dimension is not None and vector.shape[0] != dimension:
        raise DimensionError(f"Expected dimension {dimension}, got {vector.shape[0]}")
    if not np.all(np.isfinite(vector)):
        raise DegenerateVectorError("Embedding contains NaN or infinite values")
    return vector


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return math.fsum(np.multiply(a, b).tolist())


def _norm(a: np.ndarray) -> float:
    return math.sqrt(_dot(a, a))


def _clip(value: float) -> float:
    return min(1.0, max(-1.0, value))


def cosine_similarity(a: VectorLike, b: VectorLike) -> float:
    """
    Cosine similarity A.B / (|A| |B|).

    Raises:
        DimensionError: if the vectors differ in length.
        DegenerateVectorError: if either vector has zero norm.
    """
    a = to_embedding(a)
    b = to_embedding(b)
    if a.shape != b.shape:
        raise DimensionError(f"Cannot compare vectors of dimension {a.shape[0]} and {b.shape[0]}")
    norm_a = _norm(a)
    norm_b = _norm(b)
    if norm_a == 0.0 or norm_b == 0.0:
        raise DegenerateVectorError("Cosine similarity is undefined for a zero vector")
    return _clip(_dot(a, b) / (norm_a * norm_b))


@dataclass(frozen=True)
class IndexEntry:
    """One database row: an embedding key plus the case's annotations."""
    entry_id: str
    vector: Tuple[float, ...]
    meta_labels: Optional[Tuple[str, ...]] = None
    meta_text: Optional[str] = None
    modality: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "vector", tuple(float(v) for v in self.vector))
        if self.meta_labels is not None:
            object.__setattr__(self, "meta_labels", tuple(self.meta_labels))

    def metadata(self) -> dict:
        return {
            "meta_labels": list(self.meta_labels) if self.meta_labels is not None else None,
            "meta_text": self.meta_text,
            "modality": self.modality,
        }


@dataclass(frozen=True)
class RetrievedCase:
    """A ranked query hit with the entry's annotations copied over."""
    entry_id: str
    similarity: float
    meta_labels: Optional[Tuple[str, ...]] = None
    meta_text: Optional[str] = None
    modality: str = ""


@dataclass(frozen=True)
class RetrievalConfig:
    """How many neighbours to return and which entry, if any, to skip."""
    k: int = DEFAULT_K
    exclude_id: Optional[str] = None

    def __post_init__(self) -> None:
        if not isinstance(self.k, int) or self.k < 1:
            raise ConfigError(f"Retrieval k must be a positive integer, got {self.k!r}")


class Index:
    """
    Immutable retrieval database. Build it with build_index or load_index.

    Attributes:
        dimension (int): length of every stored vector.
        entries (tuple): the IndexEntry rows, in listing order.
        norms (tuple): cached Euclidean norm of every row.
    """

    def __init__(self, entries: Tuple[IndexEntry, ...], matrix: np.ndarray, dimension: int):
        self.dimension = dimension
        self.entries = entries
        self._matrix = matrix
        self._matrix64 = matrix.astype(np.float64)
        self.norms = tuple(_norm(row) for row in self._matrix64)
        self._position = {entry.entry_id: i for i, entry in enumerate(entries)}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def count(self) -> int:
        return len(self.entries)

    @property
    def entry_ids(self) -> Tuple[str, ...]:
        return tuple(entry.entry_id for entry in self.entries)

    @property
    def matrix(self) -> np.ndarray:
        """Read-only float32 view of the stored vectors."""
        view = self._matrix.view()
        view.flags.writeable = False
        return view

    def entry(self, entry_id: str) -> IndexEntry:
        return self.entries[self._position[entry_id]]

    def norm_of(self, entry_id: str) -> float:
        return self.norms[self._position[entry_id]]


def _stack(vectors: Iterable[Tuple[float, ...]], dimension: int) -> np.ndarray:
    rows = list(vectors)
    if not rows:
        return np.zeros((0, dimension), dtype=np.float32)
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), dimension)


def _assemble(entries: Sequence[IndexEntry], matrix: np.ndarray, dimension: int) -> Index:
    # Entries are rebuilt so their vectors hold exactly the stored float32 values.
    rounded = tuple(
        IndexEntry(
            entry_id=entry.entry_id,
            vector=tuple(row.tolist()),
            meta_labels=entry.meta_labels,
            meta_text=entry.meta_text,
            modality=entry.modality,
        )
        for entry, row in zip(entries, matrix.astype(np.float64))
    )
    index = Index(rounded, matrix, dimension)
    for entry, norm in zip(rounded, index.norms):
        if norm == 0.0:
            raise DegenerateVectorError(f"Entry {entry.entry_id} has a zero-norm vector")
    return index


def build_index(entries: Sequence[IndexEntry], dimension: int) -> Index:
    """
    Builds an immutable index and caches every entry's norm.

    Raises:
        DuplicateIdError: if two entries share an id.
        DimensionError: if an entry's vector length differs from dimension.
        DegenerateVectorError: if an entry's vector is zero or non-finite.
    """
    if not isinstance(dimension, int) or dimension < 1:
        raise DimensionError(f"Index dimension must be a positive integer, got {dimension!r}")

    seen = set()
    for entry in entries:
        if entry.entry_id in seen:
            raise DuplicateIdError(f"Duplicate index entry id {entry.entry_id!r}")
        seen.add(entry.entry_id)
        try:
            to_embedding(entry.vector, dimension)
        except DimensionError as err:
            raise DimensionError(f"Entry {entry.entry_id}: {err.message}") from err
        except DegenerateVectorError as err:
            raise DegenerateVectorError(f"Entry {entry.entry_id}: {err.message}") from err

    matrix = _stack((entry.vector for entry in entries), dimension)
    if not np.all(np.isfinite(matrix)):
        raise DegenerateVectorError("An entry overflows 32-bit float storage")
    index = _assemble(entries, matrix, dimension)
    logger.info("Built index with %d entries of dimension %d.", index.count, dimension)
    return index


def query_topk(index: Index, query: VectorLike, cfg: Optional[RetrievalConfig] = None) -> List[RetrievedCase]:
    """
    Returns the k entries most similar to query, most similar first.

    Similarities are rounded to SIMILARITY_DECIMALS places before ranking
    and ties are broken by entry_id ascending; cfg.exclude_id never appears.

    Raises:
        DimensionError: if the query length differs from the index dimension.
        DegenerateVectorError: if the query has zero norm.
    """
    cfg = cfg or RetrievalConfig()
    query = to_embedding(query, index.dimension)
    query_norm = _norm(query)
    if query_norm == 0.0:
        raise DegenerateVectorError("Query vector has zero norm")

    products = np.multiply(query, index._matrix64).tolist()
    scored = []
    for entry, row, norm in zip(index.entries, products, index.norms):
        if entry.entry_id == cfg.exclude_id:
            continue
        similarity = round(_clip(math.fsum(row) / (query_norm * norm)), SIMILARITY_DECIMALS)
        scored.append((-similarity, entry.entry_id, entry))
    scored.sort(key=lambda item: (item[0], item[1]))

    return [
        RetrievedCase(
            entry_id=entry.entry_id,
            similarity=-negated,
            meta_labels=entry.meta_labels,
            meta_text=entry.meta_text,
            modality=entry.modality,
        )
        for negated, _, entry in scored[:cfg.k]
    ]


def _header_bytes(index: Index) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "count": index.count,
        "dimension": index.dimension,
        "entry_ids": list(index.entry_ids),
        "entries": [entry.metadata() for entry in index.entries],
    }
    text = json.dumps(header, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    return text.encode("utf-8") + b"\n"


def save_index(index: Index, path: Union[str, Path]) -> None:
    """
    Writes the index to path. Identical indexes produce identical bytes.

    Raises:
        StorageError: if the file cannot be written.
    """
    path = Path(path)
    payload = np.ascontiguousarray(index._matrix, dtype="<f4").tobytes()
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        with tmp_path.open("wb") as f:
            f.write(MAGIC)
            f.write(_header_bytes(index))
            f.write(payload)
        os.replace(tmp_path, path)
    except OSError as err:
        raise StorageError(f"Failed to save index to {path}: {err}") from err
    logger.info("Saved index with %d entries to %s.", index.count, path)


def _read_header(raw: bytes) -> Tuple[dict, int]:
    if not raw.startswith(MAGIC):
        raise FormatError("Bad magic bytes; not an index file")
    newline = raw.find(b"\n", len(MAGIC))
    if newline < 0:
        raise FormatError("Index header is not terminated")
    try:
        header = json.loads(raw[len(MAGIC):newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"Index header is not valid JSON: {err}") from err
    if not isinstance(header, dict):
        raise FormatError("Index header must be a JSON object")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"Unsupported index format version {header.get('format_version')!r}")
    return header, newline + 1


def load_index(path: Union[str, Path]) -> Index:
    """
    Reads an index written by save_index.

    Raises:
        StorageError: if the file cannot be read.
        FormatError: if the magic, version, header or payload length is wrong.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as err:
        raise StorageError(f"Failed to read index {path}: {err}") from err

    header, offset = _read_header(raw)
    try:
        count = header["count"]
        dimension = header["dimension"]
        entry_ids = header["entry_ids"]
        metadata = header["entries"]
    except KeyError as err:
        raise FormatError(f"Index header lacks field {err}") from err
    if not isinstance(count, int) or count < 0 or not isinstance(dimension, int) or dimension < 1:
        raise FormatError(f"Invalid count/dimension {count!r}/{dimension!r}")
    if not isinstance(entry_ids, list) or not isinstance(metadata, list):
        raise FormatError("entry_ids and entries must be lists")
    if len(entry_ids) != count or len(metadata) != count:
        raise FormatError(f"Header lists {len(entry_ids)} ids and {len(metadata)} entries for count {count}")

    payload = raw[offset:]
    expected = count * dimension * 4
    if len(payload) != expected:
        raise FormatError(f"Payload holds {len(payload)} bytes, expected {expected}")
    matrix = np.frombuffer(payload, dtype="<f4").reshape(count, dimension).astype(np.float32)

    try:
        entries = [
            IndexEntry(
                entry_id=entry_id,
                vector=(),
                meta_labels=meta.get("meta_labels"),
                meta_text=meta.get("meta_text"),
                modality=meta.get("modality", ""),
            )
            for entry_id, meta in zip(entry_ids, metadata)
        ]
    except AttributeError as err:
        raise FormatError("Entry metadata must be JSON objects") from err
    if len(set(entry_ids)) != count:
        raise FormatError("Index header repeats an entry id")
    if not np.all(np.isfinite(matrix)):
        raise FormatError("Index payload contains NaN or infinite values")
    try:
        index = _assemble(entries, matrix, dimension)
    except DegenerateVectorError as err:
        raise FormatError(err.message) from err
    logger.info("Loaded index with %d entries from %s.", index.count, path)
    return index
