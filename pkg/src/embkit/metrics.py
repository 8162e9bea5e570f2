"""Ranking, correlation and clustering metrics.

All functions are pure and deterministic. Ranked inputs follow one tie-break
everywhere: descending score, then ascending doc id. NDCG uses linear gain
rel / log2(rank + 1) (trec_eval/BEIR convention); V-measure entropies are in
nats (the base cancels in the ratios).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric has no defined value on this input (e.g. AP with no positives)."""


@dataclass(frozen=True)
class RankedItem:
    doc_id: str
    score: float
    rel: int


@dataclass(frozen=True)
class RankedList:
    """Items sorted by descending score, ties broken by ascending doc id."""

    items: tuple[RankedItem, ...]

    def __post_init__(self) -> None:
        for a, b in zip(self.items, self.items[1:]):
            if a.score < b.score or (a.score == b.score and a.doc_id >= b.doc_id):
                raise ValueError(f"items out of order at {b.doc_id!r}")

    @classmethod
    def from_scores(cls, items: Sequence[tuple[str, float, int]]) -> "RankedList":
        ordered = sorted(items, key=lambda it: (-it[1], it[0]))
        return cls(tuple(RankedItem(*it) for it in ordered))


def ndcg_at_k(ranked: RankedList, ideal_rels: Sequence[int], k: int) -> float:
    """NDCG@k with DCG = sum rel_i / log2(i + 1) over ranks i = 1..min(k, n).

    ``ideal_rels`` holds all judged grades for the query; the ideal DCG sorts
    them descending. Returns 0.0 when the ideal DCG is 0.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    dcg = sum(it.rel / math.log2(i + 2) for i, it in enumerate(ranked.items[:k]))
    ideal = sorted(ideal_rels, reverse=True)[:k]
    idcg = sum(rel / math.log2(i + 2) for i, rel in enumerate(ideal))
    if idcg == 0.0:
        return 0.0
    return dcg / idcg


def average_precision(ranked_labels: Sequence[int]) -> float:
    """Mean of precision@i over the positions i holding a positive label."""
    total_pos = sum(1 for l in ranked_labels if l)
    if total_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive label")
    hits = 0
    acc = 0.0
    for i, label in enumerate(ranked_labels, start=1):
        if label:
            hits += 1
            acc += hits / i
    return acc / total_pos


def mean_average_precision(per_query: Sequence[Sequence[int]]) -> float:
    """Mean AP over queries; queries lacking positives or negatives are skipped."""
    if not per_query:
        raise UndefinedMetricError("no queries given")
    aps = []
    for labels in per_query:
        pos = sum(1 for l in labels if l)
        if pos == 0 or pos == len(labels):
            continue
        aps.append(average_precision(labels))
    if not aps:
        raise UndefinedMetricError("every query lacked positives or negatives")
    return math.fsum(aps) / len(aps)


def _fractional_ranks(values: np.ndarray) -> np.ndarray:
    # Average rank for ties: positions are 1-based, equal values share the mean.
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of fractional (average-for-ties) ranks."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError("inputs must be 1-D and of equal length")
    if len(xa) < 2:
        raise ValueError("need at least two observations")
    if np.all(xa == xa[0]) or np.all(ya == ya[0]):
        raise ValueError("constant input has undefined rank correlation")
    rx = _fractional_ranks(xa)
    ry = _fractional_ranks(ya)
    dx = rx - rx.mean()
    dy = ry - ry.mean()
    return float(np.dot(dx, dy) / math.sqrt(np.dot(dx, dx) * np.dot(dy, dy)))


def _entropy(counts: Counter, total: int) -> float:
    return -math.fsum((n / total) * math.log(n / total) for n in counts.values())


def v_measure(labels_true: Sequence[Hashable], labels_pred: Sequence[Hashable]) -> float:
    """Harmonic mean of homogeneity and completeness from conditional entropies.

    h = 1 - H(C|K)/H(C) and c = 1 - H(K|C)/H(K), with h = 1 when H(C) = 0,
    c = 1 when H(K) = 0, and V = 0 when h + c = 0.
    """
    if len(labels_true) != len(labels_pred):
        raise ValueError("label lists differ in length")
    if not labels_true:
        raise ValueError("label lists are empty")
    n = len(labels_true)
    class_counts = Counter(labels_true)
    cluster_counts = Counter(labels_pred)
    joint = Counter(zip(labels_true, labels_pred))

    h_c = _entropy(class_counts, n)
    h_k = _entropy(cluster_counts, n)
    h_c_given_k = -math.fsum(
        (m / n) * math.log(m / cluster_counts[k]) for (_, k), m in joint.items()
    )
    h_k_given_c = -math.fsum(
        (m / n) * math.log(m / class_counts[c]) for (c, _), m in joint.items()
    )
    homogeneity = 1.0 if h_c == 0.0 else 1.0 - h_c_given_k / h_c
    completeness = 1.0 if h_k == 0.0 else 1.0 - h_k_given_c / h_k
    if homogeneity + completeness == 0.0:
        return 0.0
    return 2.0 * homogeneity * completeness / (homogeneity + completeness)


def accuracy(labels_true: Sequence[Hashable], labels_pred: Sequence[Hashable]) -> float:
    if len(labels_true) != len(labels_pred):
        raise ValueError("label lists differ in length")
    if not labels_true:
        raise ValueError("label lists are empty")
    hits = sum(1 for t, p in zip(labels_true, labels_pred) if t == p)
    return hits / len(labels_true)
