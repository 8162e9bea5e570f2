"""Shared domain types, dataset file formats, and the embedding-matrix container.

Dataset files are line-delimited JSON, one record per line. Single-file kinds
live in ``<name>.<kind>.jsonl``. Two kinds span several record schemas and use
a directory instead:

* retrieval: ``<name>.retrieval/`` with ``corpus.jsonl`` ({"id", "text"}),
  ``queries.jsonl`` ({"id", "text"}) and ``qrels.jsonl``
  ({"qid", "docid", "rel"}).
* classification: ``<name>.classification/`` with ``train.jsonl`` and
  ``test.jsonl`` ({"text", "label"}).

Embedding matrices use a small binary format: magic ``EMBK``, u32 version=1,
u32 n, u32 d (little-endian), then n*d little-endian f32 values row-major.
In memory the matrix holds float64; writing truncates to f32, so round-trips
are bit-exact exactly when the values lie on the f32 grid (always true for
matrices produced by ``read_embedding_matrix``).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MATRIX_MAGIC = b"EMBK"
MATRIX_VERSION = 1


class FormatError(ValueError):
    """A file is syntactically broken: bad JSON, bad header, truncation."""


class ValidationError(ValueError):
    """A structurally valid input violates a dataset or type invariant."""


class TaskKind(str, Enum):
    RETRIEVAL = "retrieval"
    RERANKING = "reranking"
    STS = "sts"
    CLASSIFICATION = "classification"
    PAIR_CLASSIFICATION = "pairclassification"
    CLUSTERING = "clustering"


# Column labels for report tables, in their fixed display order.
COLUMN_ORDER: tuple[tuple[TaskKind, str], ...] = (
    (TaskKind.RETRIEVAL, "Retrieval"),
    (TaskKind.STS, "STS"),
    (TaskKind.PAIR_CLASSIFICATION, "PairCLF"),
    (TaskKind.CLASSIFICATION, "CLF"),
    (TaskKind.RERANKING, "Re-rank"),
    (TaskKind.CLUSTERING, "Cluster"),
)


@dataclass(frozen=True)
class TextPair:
    """One (query-side text, passage-side text) training instance."""

    query: str
    passage: str
    source: str = ""
    score: float | None = None

    def __post_init__(self) -> None:
        if not self.query.strip():
            raise ValidationError("TextPair.query is empty after trimming")
        if not self.passage.strip():
            raise ValidationError("TextPair.passage is empty after trimming")
        if self.score is not None:
            if not math.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
                raise ValidationError(f"TextPair.score {self.score!r} outside [0, 1]")


class EmbeddingMatrix:
    """Dense n x d matrix of row embeddings, optionally row-normalized.

    Data is stored float64 and marked read-only; ``normalized=True`` asserts
    every row has unit L2 norm within 1e-6.
    """

    __slots__ = ("data", "normalized")

    def __init__(self, data, normalized: bool = False) -> None:
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"embedding matrix must be 2-D, got shape {arr.shape}")
        if arr.shape[1] < 1:
            raise ValidationError("embedding dim must be >= 1")
        if arr.size and not np.isfinite(arr).all():
            raise ValidationError("embedding matrix contains non-finite values")
        if normalized and arr.shape[0]:
            norms = np.linalg.norm(arr, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
            if bad.size:
                raise ValidationError(
                    f"row {bad[0]} has norm {norms[bad[0]]!r}, matrix marked normalized"
                )
        arr.setflags(write=False)
        self.data = arr
        self.normalized = bool(normalized)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"EmbeddingMatrix(rows={self.rows}, dim={self.dim}, normalized={self.normalized})"


def normalize_rows(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit L2 norm; identity on already-normalized matrices."""
    if m.normalized:
        return m
    if m.rows == 0:
        return EmbeddingMatrix(m.data, normalized=True)
    norms = np.linalg.norm(m.data, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(f"cannot normalize zero row {zero[0]}")
    return EmbeddingMatrix(m.data / norms[:, None], normalized=True)


def write_embedding_matrix(m: EmbeddingMatrix, path) -> None:
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    header = MATRIX_MAGIC + struct.pack("<III", MATRIX_VERSION, m.rows, m.dim)
    Path(path).write_bytes(header + payload)


def read_embedding_matrix(path) -> EmbeddingMatrix:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MATRIX_MAGIC:
        raise FormatError(f"{path}: not an embedding matrix file")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != MATRIX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if d < 1:
        raise FormatError(f"{path}: dim {d} in header must be >= 1")
    expected = 16 + 4 * n * d
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - 16} bytes, header implies {expected - 16}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=16).astype(np.float64).reshape(n, d)
    return EmbeddingMatrix(data)


# ---------------------------------------------------------------------------
# Task datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RetrievalData:
    corpus: dict[str, str]
    queries: dict[str, str]
    qrels: dict[str, dict[str, int]]


@dataclass(frozen=True)
class RerankingEntry:
    query: str
    positives: tuple[str, ...]
    negatives: tuple[str, ...]


@dataclass(frozen=True)
class RerankingData:
    entries: tuple[RerankingEntry, ...]


@dataclass(frozen=True)
class STSData:
    pairs: tuple[tuple[str, str, float], ...]


@dataclass(frozen=True)
class ClassificationData:
    train: tuple[tuple[str, str], ...]
    test: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class PairClassificationData:
    pairs: tuple[tuple[str, str, int], ...]


@dataclass(frozen=True)
class ClusteringData:
    items: tuple[tuple[str, str], ...]


@dataclass(frozen=True)
class TaskDataset:
    kind: TaskKind
    name: str
    payload: object


@dataclass(frozen=True)
class DatasetScore:
    name: str
    kind: TaskKind
    metric: str
    score: float
    extras: dict = field(default_factory=dict)


@dataclass(frozen=True)
class EvaluationReport:
    """Per-dataset scores plus per-category and overall averages."""

    per_dataset: tuple[DatasetScore, ...]
    category_averages: dict[TaskKind, float]
    overall_average: float
    failed: tuple[tuple[str, TaskKind, str], ...] = ()

    @classmethod
    def build(cls, scores: Sequence[DatasetScore], failed=()) -> "EvaluationReport":
        by_kind: dict[TaskKind, list[float]] = {}
        for s in scores:
            by_kind.setdefault(s.kind, []).append(s.score)
        cat = {k: math.fsum(v) / len(v) for k, v in by_kind.items()}
        allscores = [s.score for s in scores]
        overall = math.fsum(allscores) / len(allscores) if allscores else float("nan")
        return cls(tuple(scores), cat, overall, tuple(failed))

    def check_averages(self, tol: float = 1e-12) -> None:
        """Re-derive the averages and fail loudly if they drifted."""
        rebuilt = EvaluationReport.build(self.per_dataset)
        for kind, value in self.category_averages.items():
            if abs(rebuilt.category_averages[kind] - value) > tol:
                raise ValidationError(f"category average for {kind.value} inconsistent")
        if self.per_dataset and abs(rebuilt.overall_average - self.overall_average) > tol:
            raise ValidationError("overall average inconsistent")

    def to_dict(self) -> dict:
        columns: dict[str, float | None] = {}
        for kind, label in COLUMN_ORDER:
            value = self.category_averages.get(kind)
            columns[label] = value
        columns["Average"] = self.overall_average if self.per_dataset else None
        return {
            "per_dataset": [
                {
                    "dataset": s.name,
                    "kind": s.kind.value,
                    "metric": s.metric,
                    "score": s.score,
                    "extras": s.extras,
                }
                for s in self.per_dataset
            ],
            "columns": columns,
            "category_averages": {k.value: v for k, v in self.category_averages.items()},
            "overall_average": self.overall_average if self.per_dataset else None,
            "failed": [
                {"dataset": n, "kind": k.value, "error": e} for n, k, e in self.failed
            ],
        }


# ---------------------------------------------------------------------------
# JSONL plumbing
# ---------------------------------------------------------------------------

def _iter_records(path: Path) -> Iterable[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise FormatError(f"{path}:{lineno}: record is not a JSON object")
            yield lineno, obj


def _get(obj: dict, key: str, path: Path, lineno: int, typ=str):
    if key not in obj:
        raise FormatError(f"{path}:{lineno}: missing key {key!r}")
    value = obj[key]
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise FormatError(f"{path}:{lineno}: key {key!r} is not a number")
        value = float(value)
        if not math.isfinite(value):
            raise FormatError(f"{path}:{lineno}: key {key!r} is not finite")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise FormatError(f"{path}:{lineno}: key {key!r} is not an integer")
        return value
    if not isinstance(value, typ):
        raise FormatError(f"{path}:{lineno}: key {key!r} has wrong type")
    return value


def _require_nonempty(records: list, path) -> None:
    if not records:
        raise ValidationError(f"{path}: empty dataset")


def _load_id_text(path: Path, what: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, obj in _iter_records(path):
        ident = _get(obj, "id", path, lineno)
        text = _get(obj, "text", path, lineno)
        if ident in out:
            raise ValidationError(f"{path}:{lineno}: duplicate {what} id {ident!r}")
        out[ident] = text
    return out


def _load_retrieval(base: Path) -> RetrievalData:
    corpus = _load_id_text(base / "corpus.jsonl", "corpus")
    queries = _load_id_text(base / "queries.jsonl", "query")
    _require_nonempty(list(corpus), base / "corpus.jsonl")
    _require_nonempty(list(queries), base / "queries.jsonl")
    qrels: dict[str, dict[str, int]] = {}
    qpath = base / "qrels.jsonl"
    for lineno, obj in _iter_records(qpath):
        qid = _get(obj, "qid", qpath, lineno)
        docid = _get(obj, "docid", qpath, lineno)
        rel = _get(obj, "rel", qpath, lineno, int)
        if rel < 0:
            raise ValidationError(f"{qpath}:{lineno}: relevance {rel} must be >= 0")
        if qid not in queries:
            raise ValidationError(f"{qpath}:{lineno}: unknown query id {qid!r}")
        if docid not in corpus:
            raise ValidationError(f"{qpath}:{lineno}: qrels doc id {docid!r} not in corpus")
        row = qrels.setdefault(qid, {})
        if docid in row:
            raise ValidationError(f"{qpath}:{lineno}: duplicate qrels pair ({qid!r}, {docid!r})")
        row[docid] = rel
    return RetrievalData(corpus, queries, qrels)


def _load_reranking(path: Path) -> RerankingData:
    entries = []
    for lineno, obj in _iter_records(path):
        query = _get(obj, "query", path, lineno)
        pos = _get(obj, "positive", path, lineno, list)
        neg = _get(obj, "negative", path, lineno, list)
        pos = tuple(p for p in pos if isinstance(p, str) and p.strip())
        neg = tuple(n for n in neg if isinstance(n, str) and n.strip())
        if not pos or not neg:
            continue  # entries without both sides cannot be scored
        entries.append(RerankingEntry(query, pos, neg))
    _require_nonempty(entries, path)
    return RerankingData(tuple(entries))


def _load_sts(path: Path) -> STSData:
    pairs = []
    for lineno, obj in _iter_records(path):
        s1 = _get(obj, "s1", path, lineno)
        s2 = _get(obj, "s2", path, lineno)
        score = _get(obj, "score", path, lineno, float)
        pairs.append((s1, s2, score))
    _require_nonempty(pairs, path)
    return STSData(tuple(pairs))


def _load_labeled(path: Path) -> tuple[tuple[str, str], ...]:
    items = []
    for lineno, obj in _iter_records(path):
        text = _get(obj, "text", path, lineno)
        label = _get(obj, "label", path, lineno)
        items.append((text, label))
    _require_nonempty(items, path)
    return tuple(items)


def _load_pair_classification(path: Path) -> PairClassificationData:
    pairs = []
    for lineno, obj in _iter_records(path):
        s1 = _get(obj, "s1", path, lineno)
        s2 = _get(obj, "s2", path, lineno)
        label = _get(obj, "label", path, lineno, int)
        if label not in (0, 1):
            raise ValidationError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
        pairs.append((s1, s2, label))
    _require_nonempty(pairs, path)
    return PairClassificationData(tuple(pairs))


def _dataset_name(path: Path, kind: TaskKind) -> str:
    stem = path.name
    suffix = f".{kind.value}.jsonl"
    if stem.endswith(suffix):
        return stem[: -len(suffix)]
    if stem.endswith(f".{kind.value}"):
        return stem[: -len(kind.value) - 1]
    return path.stem


def load_task_dataset(path, kind: TaskKind) -> TaskDataset:
    """Load and validate one dataset.

    ``path`` is the ``<name>.<kind>.jsonl`` file, except for retrieval and
    classification where it is the dataset directory (see module docstring).
    """
    kind = TaskKind(kind)
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset path {p} does not exist")
    if kind is TaskKind.RETRIEVAL:
        payload: object = _load_retrieval(p)
    elif kind is TaskKind.CLASSIFICATION:
        train = _load_labeled(p / "train.jsonl")
        test = _load_labeled(p / "test.jsonl")
        payload = ClassificationData(train, test)
    elif kind is TaskKind.RERANKING:
        payload = _load_reranking(p)
    elif kind is TaskKind.STS:
        payload = _load_sts(p)
    elif kind is TaskKind.PAIR_CLASSIFICATION:
        payload = _load_pair_classification(p)
    else:
        payload = ClusteringData(_load_labeled(p))
    return TaskDataset(kind, _dataset_name(p, kind), payload)


def _dump_lines(path: Path, records: Iterable[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def write_task_dataset(ds: TaskDataset, path) -> None:
    """Write a dataset in the on-disk layout that load_task_dataset expects."""
    p = Path(path)
    if ds.kind is TaskKind.RETRIEVAL:
        d: RetrievalData = ds.payload
        _dump_lines(p / "corpus.jsonl", ({"id": i, "text": t} for i, t in d.corpus.items()))
        _dump_lines(p / "queries.jsonl", ({"id": i, "text": t} for i, t in d.queries.items()))
        _dump_lines(
            p / "qrels.jsonl",
            (
                {"qid": qid, "docid": docid, "rel": rel}
                for qid, row in d.qrels.items()
                for docid, rel in row.items()
            ),
        )
    elif ds.kind is TaskKind.CLASSIFICATION:
        c: ClassificationData = ds.payload
        _dump_lines(p / "train.jsonl", ({"text": t, "label": l} for t, l in c.train))
        _dump_lines(p / "test.jsonl", ({"text": t, "label": l} for t, l in c.test))
    elif ds.kind is TaskKind.RERANKING:
        _dump_lines(
            p,
            (
                {"query": e.query, "positive": list(e.positives), "negative": list(e.negatives)}
                for e in ds.payload.entries
            ),
        )
    elif ds.kind is TaskKind.STS:
        _dump_lines(p, ({"s1": a, "s2": b, "score": s} for a, b, s in ds.payload.pairs))
    elif ds.kind is TaskKind.PAIR_CLASSIFICATION:
        _dump_lines(p, ({"s1": a, "s2": b, "label": l} for a, b, l in ds.payload.pairs))
    else:
        _dump_lines(p, ({"text": t, "label": l} for t, l in ds.payload.items))


def load_text_pairs(path) -> list[TextPair]:
    p = Path(path)
    pairs = []
    for lineno, obj in _iter_records(p):
        query = _get(obj, "query", p, lineno)
        passage = _get(obj, "passage", p, lineno)
        source = obj.get("source", "")
        score = _get(obj, "score", p, lineno, float) if obj.get("score") is not None else None
        try:
            pairs.append(TextPair(query, passage, source, score))
        except ValidationError as exc:
            raise ValidationError(f"{p}:{lineno}: {exc}") from exc
    return pairs


def text_pair_record(pair: TextPair) -> dict:
    rec = {"query": pair.query, "passage": pair.passage, "source": pair.source}
    if pair.score is not None:
        rec["score"] = pair.score
    return rec


def write_text_pairs(pairs: Iterable[TextPair], path) -> None:
    _dump_lines(Path(path), (text_pair_record(p) for p in pairs))
