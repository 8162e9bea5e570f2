import json
import math

import numpy as np
import pytest

from embkit.datamodel import (
    ClassificationData,
    ClusteringData,
    DatasetScore,
    EmbeddingMatrix,
    EvaluationReport,
    FormatError,
    PairClassificationData,
    RerankingData,
    RerankingEntry,
    RetrievalData,
    STSData,
    TaskDataset,
    TaskKind,
    TextPair,
    ValidationError,
    load_task_dataset,
    load_text_pairs,
    normalize_rows,
    read_embedding_matrix,
    write_embedding_matrix,
    write_task_dataset,
    write_text_pairs,
)


def jsonl(path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


# ---------------------------------------------------------------------------
# TextPair
# ---------------------------------------------------------------------------

def test_text_pair_validation():
    TextPair("q", "p", "qa", 0.5)
    with pytest.raises(ValidationError):
        TextPair("  ", "p")
    with pytest.raises(ValidationError):
        TextPair("q", "\t\n")
    with pytest.raises(ValidationError):
        TextPair("q", "p", score=1.5)
    with pytest.raises(ValidationError):
        TextPair("q", "p", score=float("nan"))


def test_text_pair_file_roundtrip(tmp_path):
    pairs = [TextPair("q1", "p1", "qa", 0.5), TextPair("q2", "p2", "title-body")]
    write_text_pairs(pairs, tmp_path / "pairs.jsonl")
    assert load_text_pairs(tmp_path / "pairs.jsonl") == pairs


# ---------------------------------------------------------------------------
# EmbeddingMatrix
# ---------------------------------------------------------------------------

def test_matrix_validation():
    with pytest.raises(ValidationError):
        EmbeddingMatrix(np.array([[1.0, float("inf")]]))
    with pytest.raises(ValidationError):
        EmbeddingMatrix(np.zeros((2, 0)))
    with pytest.raises(ValidationError):
        EmbeddingMatrix(np.array([[2.0, 0.0]]), normalized=True)
    m = EmbeddingMatrix(np.array([[1.0, 0.0]]), normalized=True)
    assert (m.rows, m.dim) == (1, 2)
    with pytest.raises(ValueError):
        m.data[0, 0] = 5.0  # read-only after construction


def test_normalize_345_triangle():
    m = normalize_rows(EmbeddingMatrix(np.array([[3.0, 4.0]])))
    assert m.normalized
    assert m.data[0] == pytest.approx([0.6, 0.8], abs=1e-12)


def test_normalize_unit_row_unchanged():
    row = np.array([[0.6, 0.8]])
    out = normalize_rows(EmbeddingMatrix(row))
    assert np.abs(out.data - row).max() < 1e-9


def test_normalize_preserves_direction():
    rng = np.random.default_rng(3)
    raw = rng.normal(size=(20, 7))
    out = normalize_rows(EmbeddingMatrix(raw))
    norms = np.linalg.norm(out.data, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-6
    cos = np.sum(out.data * raw, axis=1) / np.linalg.norm(raw, axis=1)
    assert np.abs(cos - 1.0).max() < 1e-9


def test_normalize_idempotent():
    rng = np.random.default_rng(5)
    once = normalize_rows(EmbeddingMatrix(rng.normal(size=(10, 4))))
    twice = normalize_rows(once)
    assert np.abs(twice.data - once.data).max() < 1e-9


def test_normalize_zero_row():
    with pytest.raises(ValidationError, match="row 1"):
        normalize_rows(EmbeddingMatrix(np.array([[1.0, 0.0], [0.0, 0.0]])))


def test_matrix_file_roundtrip(tmp_path):
    m = EmbeddingMatrix(np.array([[1.0, 0.0, 0.0]]))
    write_embedding_matrix(m, tmp_path / "m.embk")
    assert read_embedding_matrix(tmp_path / "m.embk") == m


def test_matrix_file_roundtrip_empty(tmp_path):
    m = EmbeddingMatrix(np.zeros((0, 8)))
    write_embedding_matrix(m, tmp_path / "m.embk")
    back = read_embedding_matrix(tmp_path / "m.embk")
    assert back.rows == 0 and back.dim == 8


def test_matrix_file_roundtrip_is_bit_exact_on_f32_grid(tmp_path):
    rng = np.random.default_rng(0)
    data = rng.normal(size=(5, 3)).astype(np.float32).astype(np.float64)
    write_embedding_matrix(EmbeddingMatrix(data), tmp_path / "m.embk")
    back = read_embedding_matrix(tmp_path / "m.embk")
    assert np.array_equal(back.data, data)


def test_matrix_file_truncation(tmp_path):
    m = EmbeddingMatrix(np.ones((2, 2)))
    write_embedding_matrix(m, tmp_path / "m.embk")
    raw = (tmp_path / "m.embk").read_bytes()
    (tmp_path / "bad.embk").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_embedding_matrix(tmp_path / "bad.embk")
    (tmp_path / "junk.embk").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(FormatError):
        read_embedding_matrix(tmp_path / "junk.embk")


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

def make_retrieval(tmp_path, qrels=None):
    base = tmp_path / "toy.retrieval"
    jsonl(base / "corpus.jsonl", [{"id": "d1", "text": "alpha"}, {"id": "d2", "text": "beta"}])
    jsonl(base / "queries.jsonl", [{"id": "q1", "text": "find alpha"}])
    jsonl(base / "qrels.jsonl", qrels if qrels is not None else [{"qid": "q1", "docid": "d1", "rel": 1}])
    return base


def test_load_retrieval(tmp_path):
    ds = load_task_dataset(make_retrieval(tmp_path), TaskKind.RETRIEVAL)
    assert ds.name == "toy"
    assert len(ds.payload.corpus) == 2
    assert len(ds.payload.queries) == 1
    assert ds.payload.qrels["q1"]["d1"] == 1


def test_load_retrieval_unknown_doc(tmp_path):
    base = make_retrieval(tmp_path, qrels=[{"qid": "q1", "docid": "dX", "rel": 1}])
    with pytest.raises(ValidationError, match="dX"):
        load_task_dataset(base, TaskKind.RETRIEVAL)


def test_load_retrieval_duplicate_id(tmp_path):
    base = make_retrieval(tmp_path)
    jsonl(base / "corpus.jsonl", [{"id": "d1", "text": "a"}, {"id": "d1", "text": "b"}])
    with pytest.raises(ValidationError, match="d1"):
        load_task_dataset(base, TaskKind.RETRIEVAL)


def test_empty_clustering_file(tmp_path):
    path = tmp_path / "empty.clustering.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(ValidationError, match="empty dataset"):
        load_task_dataset(path, TaskKind.CLUSTERING)


def test_sts_nan_score_rejected(tmp_path):
    path = tmp_path / "bad.sts.jsonl"
    path.write_text('{"s1": "a", "s2": "b", "score": NaN}\n', encoding="utf-8")
    with pytest.raises(FormatError, match=":1"):
        load_task_dataset(path, TaskKind.STS)


def test_malformed_line_reports_lineno(tmp_path):
    path = tmp_path / "bad.sts.jsonl"
    path.write_text('{"s1": "a", "s2": "b", "score": 1.0}\n{oops\n', encoding="utf-8")
    with pytest.raises(FormatError, match=":2"):
        load_task_dataset(path, TaskKind.STS)


def test_reranking_filters_incomplete_entries(tmp_path):
    path = tmp_path / "rr.reranking.jsonl"
    jsonl(path, [
        {"query": "q", "positive": ["p"], "negative": ["n"]},
        {"query": "q2", "positive": ["p"], "negative": []},
    ])
    ds = load_task_dataset(path, TaskKind.RERANKING)
    assert len(ds.payload.entries) == 1
    jsonl(path, [{"query": "q", "positive": [], "negative": ["n"]}])
    with pytest.raises(ValidationError, match="empty dataset"):
        load_task_dataset(path, TaskKind.RERANKING)


def test_pair_classification_label_check(tmp_path):
    path = tmp_path / "pc.pairclassification.jsonl"
    jsonl(path, [{"s1": "a", "s2": "b", "label": 2}])
    with pytest.raises(ValidationError):
        load_task_dataset(path, TaskKind.PAIR_CLASSIFICATION)


@pytest.mark.parametrize("kind,payload", [
    (TaskKind.RETRIEVAL, RetrievalData(
        {"d1": "alpha", "d2": "beta"}, {"q1": "find alpha"}, {"q1": {"d1": 2, "d2": 0}})),
    (TaskKind.RERANKING, RerankingData((RerankingEntry("q", ("p1", "p2"), ("n1",)),))),
    (TaskKind.STS, STSData((("a", "b", 0.5), ("c", "d", 1.0)))),
    (TaskKind.CLASSIFICATION, ClassificationData((("t1", "x"), ("t2", "y")), (("t3", "x"),))),
    (TaskKind.PAIR_CLASSIFICATION, PairClassificationData((("a", "b", 1), ("c", "d", 0)))),
    (TaskKind.CLUSTERING, ClusteringData((("t1", "x"), ("t2", "y")))),
])
def test_dataset_roundtrip(tmp_path, kind, payload):
    ds = TaskDataset(kind, "toy", payload)
    suffix = "" if kind in (TaskKind.RETRIEVAL, TaskKind.CLASSIFICATION) else ".jsonl"
    path = tmp_path / f"toy.{kind.value}{suffix}"
    write_task_dataset(ds, path)
    assert load_task_dataset(path, kind) == ds


# ---------------------------------------------------------------------------
# EvaluationReport
# ---------------------------------------------------------------------------

def test_report_averages_and_resummation():
    scores = [
        DatasetScore("a", TaskKind.RETRIEVAL, "ndcg_at_10", 0.6),
        DatasetScore("b", TaskKind.RETRIEVAL, "ndcg_at_10", 0.8),
        DatasetScore("c", TaskKind.STS, "spearman", 0.5),
    ]
    report = EvaluationReport.build(scores)
    assert report.category_averages[TaskKind.RETRIEVAL] == pytest.approx(0.7, abs=1e-12)
    assert report.overall_average == pytest.approx((0.6 + 0.8 + 0.5) / 3, abs=1e-12)
    report.check_averages()
    # independent re-summation in reverse order
    resum = math.fsum(s.score for s in reversed(scores)) / len(scores)
    assert abs(resum - report.overall_average) < 1e-12


def test_report_column_order():
    report = EvaluationReport.build(
        [DatasetScore("a", TaskKind.CLUSTERING, "v_measure", 0.4)]
    )
    columns = list(report.to_dict()["columns"])
    assert columns == ["Retrieval", "STS", "PairCLF", "CLF", "Re-rank", "Cluster", "Average"]
