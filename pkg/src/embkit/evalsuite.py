"""Six-task evaluation protocols plus the suite runner that aggregates a report.

All runners L2-normalize embeddings up front, so every score depends only on
cosine geometry and is invariant to rescaling the raw encoder output.
Classification fits a deterministic softmax-regression probe; clustering runs
seeded mini-batch k-means with batch size 32 and k equal to the number of
distinct labels.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import metrics
from .datamodel import (
    ClassificationData,
    ClusteringData,
    DatasetScore,
    EmbeddingMatrix,
    EvaluationReport,
    PairClassificationData,
    RerankingData,
    RetrievalData,
    STSData,
    TaskDataset,
    TaskKind,
    ValidationError,
    load_task_dataset,
    normalize_rows,
)
from .encoder import fnv1a_64


class EncoderHandle(Protocol):
    """Anything that encodes (texts, side) -> EmbeddingMatrix with a fixed dim."""

    dim: int

    def encode(self, texts: Sequence[str], side: str) -> EmbeddingMatrix:
        ...


@dataclass(frozen=True)
class TaskList:
    datasets: tuple[TaskDataset, ...]

    def __post_init__(self) -> None:
        names = [d.name for d in self.datasets]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValidationError(f"duplicate dataset names {dupes}")

    def __iter__(self):
        return iter(self.datasets)

    def __len__(self) -> int:
        return len(self.datasets)


@dataclass
class ProbeConfig:
    max_iters: int = 100
    learning_rate: float = 1.0
    l2: float = 1e-4
    seed: int = 0


@dataclass
class ClusterConfig:
    batch_size: int = 32
    steps: int = 100
    seed: int = 0


def _embed(enc: EncoderHandle, texts: Sequence[str], side: str) -> np.ndarray:
    matrix = enc.encode(texts, side)
    if matrix.rows != len(texts):
        raise ValidationError(f"encoder returned {matrix.rows} rows for {len(texts)} texts")
    return normalize_rows(matrix).data


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

def _retrieval_ndcgs(ds: TaskDataset, enc: EncoderHandle, k: int) -> tuple[list[float], int]:
    data: RetrievalData = ds.payload
    doc_ids = list(data.corpus)
    corpus = _embed(enc, [data.corpus[d] for d in doc_ids], "passage")
    queries = _embed(enc, [data.queries[q] for q in data.queries], "query")
    if corpus.shape[1] != queries.shape[1]:
        raise ValidationError(
            f"encoder dim mismatch: passages {corpus.shape[1]}, queries {queries.shape[1]}"
        )
    ndcgs: list[float] = []
    skipped = 0
    qids = list(data.queries)
    block = 256
    for lo in range(0, len(qids), block):
        sims = queries[lo : lo + block] @ corpus.T
        for row, qid in enumerate(qids[lo : lo + block]):
            judged = data.qrels.get(qid, {})
            if not any(rel > 0 for rel in judged.values()):
                skipped += 1
                continue
            ranked = metrics.RankedList.from_scores(
                [(doc_id, float(sims[row, j]), judged.get(doc_id, 0))
                 for j, doc_id in enumerate(doc_ids)]
            )
            ndcgs.append(metrics.ndcg_at_k(ranked, list(judged.values()), k))
    return ndcgs, skipped


def run_retrieval(ds: TaskDataset, enc: EncoderHandle, k: int = 10) -> float:
    """Mean NDCG@k over queries with at least one judged positive; ranking is
    an exact brute-force scan of the corpus."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ndcgs, _ = _retrieval_ndcgs(ds, enc, k)
    if not ndcgs:
        raise metrics.UndefinedMetricError(f"{ds.name}: no query has a judged positive")
    return float(np.mean(ndcgs))


# ---------------------------------------------------------------------------
# Re-ranking
# ---------------------------------------------------------------------------

def run_reranking(ds: TaskDataset, enc: EncoderHandle) -> float:
    data: RerankingData = ds.payload
    per_query: list[list[int]] = []
    for entry in data.entries:
        candidates = list(entry.positives) + list(entry.negatives)
        labels = [1] * len(entry.positives) + [0] * len(entry.negatives)
        query = _embed(enc, [entry.query], "query")[0]
        cand = _embed(enc, candidates, "passage")
        scores = cand @ query
        ranked = metrics.RankedList.from_scores(
            [(f"{i:06d}", float(scores[i]), labels[i]) for i in range(len(candidates))]
        )
        per_query.append([item.rel for item in ranked.items])
    return metrics.mean_average_precision(per_query)


# ---------------------------------------------------------------------------
# STS
# ---------------------------------------------------------------------------

def run_sts(ds: TaskDataset, enc: EncoderHandle) -> float:
    data: STSData = ds.payload
    left = _embed(enc, [a for a, _, _ in data.pairs], "passage")
    right = _embed(enc, [b for _, b, _ in data.pairs], "passage")
    sims = np.sum(left * right, axis=1)
    gold = [s for _, _, s in data.pairs]
    try:
        return metrics.spearman(sims, gold)
    except ValueError as exc:
        raise ValueError(f"{ds.name}: {exc}") from exc


# ---------------------------------------------------------------------------
# Classification
# ---------------------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _fit_probe(
    x_train: np.ndarray, y_train: np.ndarray, n_classes: int, cfg: ProbeConfig
) -> tuple[np.ndarray, np.ndarray]:
    n, d = x_train.shape
    onehot = np.zeros((n, n_classes))
    onehot[np.arange(n), y_train] = 1.0
    weights = np.zeros((d, n_classes))
    bias = np.zeros(n_classes)
    for _ in range(cfg.max_iters):
        probs = _softmax(x_train @ weights + bias)
        delta = (probs - onehot) / n
        weights -= cfg.learning_rate * (x_train.T @ delta + cfg.l2 * weights)
        bias -= cfg.learning_rate * delta.sum(axis=0)
    return weights, bias


def classification_scores(
    ds: TaskDataset, enc: EncoderHandle, cfg: ProbeConfig | None = None
) -> tuple[float, float | None]:
    """(test accuracy, macro one-vs-rest AP or None when AP is undefined)."""
    cfg = cfg or ProbeConfig()
    data: ClassificationData = ds.payload
    classes = sorted({label for _, label in data.train})
    if len(classes) < 2:
        raise ValidationError(f"{ds.name}: train split has a single class")
    index = {c: i for i, c in enumerate(classes)}

    x_train = _embed(enc, [t for t, _ in data.train], "passage")
    x_test = _embed(enc, [t for t, _ in data.test], "passage")
    center = x_train.mean(axis=0)
    x_train = x_train - center
    x_test = x_test - center
    y_train = np.array([index[l] for _, l in data.train])

    weights, bias = _fit_probe(x_train, y_train, len(classes), cfg)
    probs = _softmax(x_test @ weights + bias)
    predicted = [classes[i] for i in probs.argmax(axis=1)]
    truth = [l for _, l in data.test]
    acc = metrics.accuracy(truth, predicted)

    aps = []
    for c, col in index.items():
        labels = [1 if t == c else 0 for t in truth]
        if not any(labels):
            continue
        ranked = metrics.RankedList.from_scores(
            [(f"{i:06d}", float(probs[i, col]), labels[i]) for i in range(len(truth))]
        )
        aps.append(metrics.average_precision([item.rel for item in ranked.items]))
    macro_ap = float(np.mean(aps)) if aps else None
    return acc, macro_ap


def run_classification(ds: TaskDataset, enc: EncoderHandle, cfg: ProbeConfig | None = None) -> float:
    return classification_scores(ds, enc, cfg)[0]


# ---------------------------------------------------------------------------
# Pair classification
# ---------------------------------------------------------------------------

def run_pair_classification(ds: TaskDataset, enc: EncoderHandle) -> float:
    data: PairClassificationData = ds.payload
    labels = [l for _, _, l in data.pairs]
    if len(set(labels)) < 2:
        raise metrics.UndefinedMetricError(f"{ds.name}: needs both label values")
    left = _embed(enc, [a for a, _, _ in data.pairs], "passage")
    right = _embed(enc, [b for _, b, _ in data.pairs], "passage")
    sims = np.sum(left * right, axis=1)
    ranked = metrics.RankedList.from_scores(
        [(f"{i:06d}", float(sims[i]), labels[i]) for i in range(len(labels))]
    )
    return metrics.average_precision([item.rel for item in ranked.items])


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            pick = int(rng.integers(n))  # all points coincide with a center
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[c] = x[pick]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))
    return centers


def _assign(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def minibatch_kmeans(x: np.ndarray, k: int, cfg: ClusterConfig) -> np.ndarray:
    """Sculley-style mini-batch k-means; returns the final assignment.

    Centers left empty by the final assignment are reseeded once each to the
    point farthest from its own center."""
    n = x.shape[0]
    if n < k:
        raise ValidationError(f"{n} points but k={k}")
    rng = np.random.default_rng(cfg.seed)
    centers = _kmeans_pp_init(x, k, rng)
    counts = np.ones(k)
    for _ in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        batch = x[idx]
        nearest = _assign(batch, centers)
        for point, c in zip(batch, nearest):
            counts[c] += 1.0
            eta = 1.0 / counts[c]
            centers[c] = (1.0 - eta) * centers[c] + eta * point
    assignment = _assign(x, centers)
    reseeded: set[int] = set()
    while True:
        empty = [c for c in range(k) if c not in set(assignment) and c not in reseeded]
        if not empty:
            break
        c = empty[0]
        own = ((x - centers[assignment]) ** 2).sum(axis=1)
        centers[c] = x[int(own.argmax())]
        reseeded.add(c)
        assignment = _assign(x, centers)
    return assignment


def run_clustering(ds: TaskDataset, enc: EncoderHandle, cfg: ClusterConfig | None = None) -> float:
    cfg = cfg or ClusterConfig()
    data: ClusteringData = ds.payload
    labels = [l for _, l in data.items]
    k = len(set(labels))
    x = _embed(enc, [t for t, _ in data.items], "passage")
    assignment = minibatch_kmeans(x, k, cfg)
    return metrics.v_measure(labels, [int(a) for a in assignment])


# ---------------------------------------------------------------------------
# Suite runner
# ---------------------------------------------------------------------------

MAIN_METRIC = {
    TaskKind.RETRIEVAL: "ndcg_at_{k}",
    TaskKind.RERANKING: "map",
    TaskKind.STS: "spearman",
    TaskKind.CLASSIFICATION: "accuracy",
    TaskKind.PAIR_CLASSIFICATION: "average_precision",
    TaskKind.CLUSTERING: "v_measure",
}

_KIND_SUFFIXES = {kind.value: kind for kind in TaskKind}


def discover_tasks(task_dir) -> TaskList:
    """Collect datasets from a directory by the <name>.<kind>[.jsonl] convention."""
    root = Path(task_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"task directory {root} does not exist")
    found: list[TaskDataset] = []
    for entry in sorted(root.iterdir()):
        parts = entry.name.split(".")
        if entry.is_dir() and len(parts) == 2 and parts[1] in _KIND_SUFFIXES:
            found.append(load_task_dataset(entry, _KIND_SUFFIXES[parts[1]]))
        elif entry.is_file() and len(parts) == 3 and parts[2] == "jsonl" and parts[1] in _KIND_SUFFIXES:
            found.append(load_task_dataset(entry, _KIND_SUFFIXES[parts[1]]))
    return TaskList(tuple(found))


def _dataset_seed(suite_seed: int, name: str) -> int:
    return (suite_seed ^ fnv1a_64(name)) % (2**31)


def _run_dataset(
    ds: TaskDataset, enc: EncoderHandle, k: int, seed: int
) -> DatasetScore:
    metric = MAIN_METRIC[ds.kind].format(k=k)
    extras: dict = {}
    if ds.kind is TaskKind.RETRIEVAL:
        ndcgs, skipped = _retrieval_ndcgs(ds, enc, k)
        if not ndcgs:
            raise metrics.UndefinedMetricError(f"{ds.name}: no query has a judged positive")
        score = float(np.mean(ndcgs))
        extras = {"k": k, "queries_evaluated": len(ndcgs), "queries_skipped": skipped}
    elif ds.kind is TaskKind.RERANKING:
        score = run_reranking(ds, enc)
        extras = {"entries": len(ds.payload.entries)}
    elif ds.kind is TaskKind.STS:
        score = run_sts(ds, enc)
        extras = {"pairs": len(ds.payload.pairs)}
    elif ds.kind is TaskKind.CLASSIFICATION:
        score, macro_ap = classification_scores(ds, enc, ProbeConfig(seed=seed))
        extras = {"macro_ovr_ap": macro_ap}
    elif ds.kind is TaskKind.PAIR_CLASSIFICATION:
        score = run_pair_classification(ds, enc)
        extras = {"pairs": len(ds.payload.pairs)}
    else:
        score = run_clustering(ds, enc, ClusterConfig(seed=seed))
        extras = {"k": len({l for _, l in ds.payload.items})}
    return DatasetScore(ds.name, ds.kind, metric, score, extras)


def run_suite(
    tasks: TaskList | Sequence[TaskDataset],
    enc: EncoderHandle,
    out_dir,
    seed: int = 0,
    k: int = 10,
    jobs: int = 1,
) -> EvaluationReport:
    """Run every task, write one result file per dataset plus report.json.

    Failing datasets are recorded under "failed" and excluded from the
    averages. Output bytes depend only on the inputs and the seed; tasks may
    run in parallel because results are reduced in task order."""
    if not isinstance(tasks, TaskList):
        tasks = TaskList(tuple(tasks))
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def one(ds: TaskDataset):
        try:
            return _run_dataset(ds, enc, k, _dataset_seed(seed, ds.name)), None
        except Exception as exc:  # noqa: BLE001 - per-dataset isolation is the contract
            return None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(one, tasks.datasets))
    else:
        outcomes = [one(ds) for ds in tasks.datasets]

    scores: list[DatasetScore] = []
    failed: list[tuple[str, TaskKind, str]] = []
    for ds, (result, error) in zip(tasks.datasets, outcomes):
        if result is not None:
            scores.append(result)
            payload = {
                "dataset": result.name,
                "kind": result.kind.value,
                "metric": result.metric,
                "score": result.score,
                "extras": result.extras,
                "seed": seed,
            }
        else:
            failed.append((ds.name, ds.kind, error))
            payload = {
                "dataset": ds.name,
                "kind": ds.kind.value,
                "metric": MAIN_METRIC[ds.kind].format(k=k),
                "score": None,
                "error": error,
                "seed": seed,
            }
        (out / f"{ds.name}.json").write_text(
            json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
        )

    report = EvaluationReport.build(scores, failed)
    report.check_averages()
    (out / "report.json").write_text(
        json.dumps(report.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8"
    )
    return report
