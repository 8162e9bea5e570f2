"""Seeded generator for a coherent desk-scale benchmark.

The synthetic world is built from topic clusters: every topic owns disjoint
query-side and passage-side vocabularies, plus shared noise words. The six
task datasets, the unlabeled/labeled training pairs and the pre-training
corpus all draw from the same vocabulary, so training on the pairs measurably
improves the benchmark scores.

A two-task substrate lives under ``twotask/``: per topic the corpus holds
"definition" and "usage example" entries that only marker words tell apart,
and the two retrieval tasks want opposite entries for the same queries. A
single embedding cannot satisfy both orderings, which is exactly the conflict
query-side instructions resolve.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import (
    ClassificationData,
    ClusteringData,
    PairClassificationData,
    RerankingData,
    RerankingEntry,
    RetrievalData,
    STSData,
    TaskDataset,
    TaskKind,
    TextPair,
    write_task_dataset,
    write_text_pairs,
)
from .trainer import LabeledTaskPair, write_labeled_pairs

INSTRUCTIONS = {
    "retrieval": "search relevant passages for the query",
    "def": "find the definition entry for the topic",
    "ex": "find the usage example entry for the topic",
}

_DEF_MARKERS = ["defma", "defmb"]
_EX_MARKERS = ["exma", "exmb"]


@dataclass
class SynthConfig:
    seed: int = 0
    topics: int = 8
    size: int = 8  # corpus documents per topic; other counts derive from it

    def __post_init__(self) -> None:
        if self.topics < 2:
            raise ValueError("need at least 2 topics")
        if self.size < 2:
            raise ValueError("need size >= 2")


@dataclass
class SynthSuite:
    tasks: list[TaskDataset]
    twotask_datasets: list[TaskDataset]
    unlabeled_pairs: list[TextPair]
    labeled_pairs: list[LabeledTaskPair]
    twotask_pairs: list[LabeledTaskPair]
    pretrain_texts: list[str]
    instructions: dict[str, str] = field(default_factory=dict)
    structured_docs: list[dict] = field(default_factory=list)

    @property
    def retrieval_corpus_texts(self) -> list[str]:
        for ds in self.tasks:
            if ds.kind is TaskKind.RETRIEVAL:
                return list(ds.payload.corpus.values())
        return []


class _World:
    def __init__(self, cfg: SynthConfig) -> None:
        self.rng = np.random.default_rng(cfg.seed)
        self.topics = cfg.topics
        self.qwords = [[f"q{t}w{i}" for i in range(10)] for t in range(cfg.topics)]
        self.dwords = [[f"d{t}w{i}" for i in range(10)] for t in range(cfg.topics)]
        self.noise = [f"x{i}" for i in range(30)]

    def _draw(self, pool: list[str], n: int) -> list[str]:
        idx = self.rng.choice(len(pool), size=min(n, len(pool)), replace=False)
        return [pool[i] for i in idx]

    def query_text(self, t: int) -> str:
        return " ".join(self._draw(self.qwords[t], 4) + self._draw(self.noise, 1))

    def doc_text(self, t: int) -> str:
        return " ".join(self._draw(self.dwords[t], 6) + self._draw(self.noise, 2))

    def topic_text(self, t: int) -> str:
        words = self._draw(self.qwords[t], 2) + self._draw(self.dwords[t], 3)
        return " ".join(words + self._draw(self.noise, 1))

    def marked_doc(self, t: int, markers: list[str]) -> str:
        return " ".join(self._draw(self.dwords[t], 5) + markers + self._draw(self.noise, 1))

    def other_topic(self, t: int) -> int:
        s = int(self.rng.integers(self.topics - 1))
        return s if s < t else s + 1


def generate(cfg: SynthConfig) -> SynthSuite:
    world = _World(cfg)
    T, S = cfg.topics, cfg.size
    per_topic_queries = max(2, S // 2)

    # Retrieval: binary qrels, every same-topic document is relevant.
    corpus: dict[str, str] = {}
    queries: dict[str, str] = {}
    qrels: dict[str, dict[str, int]] = {}
    topic_doc_ids: list[list[str]] = []
    for t in range(T):
        ids = []
        for j in range(S):
            doc_id = f"doc-{t:02d}-{j:03d}"
            corpus[doc_id] = world.doc_text(t)
            ids.append(doc_id)
        topic_doc_ids.append(ids)
    for t in range(T):
        for j in range(per_topic_queries):
            qid = f"qry-{t:02d}-{j:03d}"
            queries[qid] = world.query_text(t)
            qrels[qid] = {doc_id: 1 for doc_id in topic_doc_ids[t]}
    retrieval = TaskDataset(
        TaskKind.RETRIEVAL, "websearch", RetrievalData(corpus, queries, qrels)
    )

    # Re-ranking: same-topic positives against other-topic negatives.
    entries = []
    for t in range(T):
        for _ in range(min(per_topic_queries, 3)):
            positives = tuple(corpus[i] for i in world._draw(topic_doc_ids[t], 2))
            negatives = tuple(
                corpus[world._draw(topic_doc_ids[world.other_topic(t)], 1)[0]]
                for _ in range(6)
            )
            entries.append(RerankingEntry(world.query_text(t), positives, negatives))
    reranking = TaskDataset(TaskKind.RERANKING, "candidates", RerankingData(tuple(entries)))

    # STS: graded pairs; higher gold means more shared topic structure.
    sts_pairs = []
    for t in range(T):
        s = world.other_topic(t)
        sts_pairs.append((world.query_text(t), world.query_text(t), 1.0))
        sts_pairs.append((world.query_text(t), world.doc_text(t), 0.6))
        sts_pairs.append((world.query_text(t), world.query_text(s), 0.2))
        sts_pairs.append((world.query_text(t), world.doc_text(s), 0.0))
    sts = TaskDataset(TaskKind.STS, "similarity", STSData(tuple(sts_pairs)))

    # Classification and clustering share the topic-text generator.
    train = tuple((world.topic_text(t), f"topic{t}") for t in range(T) for _ in range(S))
    test = tuple(
        (world.topic_text(t), f"topic{t}") for t in range(T) for _ in range(per_topic_queries)
    )
    classification = TaskDataset(
        TaskKind.CLASSIFICATION, "topiccls", ClassificationData(train, test)
    )
    clustering = TaskDataset(
        TaskKind.CLUSTERING,
        "topicgroups",
        ClusteringData(tuple((world.topic_text(t), f"topic{t}") for t in range(T) for _ in range(S))),
    )

    # Pair classification: same-topic query/doc pairs vs cross-topic ones.
    pc_pairs = []
    for t in range(T):
        for _ in range(2):
            pc_pairs.append((world.query_text(t), world.doc_text(t), 1))
            pc_pairs.append((world.query_text(t), world.doc_text(world.other_topic(t)), 0))
    pair_classification = TaskDataset(
        TaskKind.PAIR_CLASSIFICATION, "pairrel", PairClassificationData(tuple(pc_pairs))
    )

    # Training data.
    unlabeled = [
        TextPair(world.query_text(t), world.doc_text(t), "title-body")
        for _ in range(S * 16)
        for t in range(T)
    ]
    labeled = []
    for t in range(T):
        for j in range(S):
            positive = corpus[topic_doc_ids[t][j]]
            negative = corpus[topic_doc_ids[world.other_topic(t)][int(world.rng.integers(S))]]
            labeled.append(
                LabeledTaskPair(
                    TextPair(world.query_text(t), positive, "qa"), "retrieval", negative
                )
            )
    pretrain_texts = list(corpus.values()) + [world.doc_text(t) for t in range(T) for _ in range(4)]

    # Two-task substrate: definition vs usage entries behind one corpus.
    dx_corpus: dict[str, str] = {}
    def_ids: list[list[str]] = []
    ex_ids: list[list[str]] = []
    for t in range(T):
        dids, xids = [], []
        for v in range(2):
            did = f"def-{t:02d}-{v}"
            dx_corpus[did] = world.marked_doc(t, _DEF_MARKERS)
            dids.append(did)
            xid = f"exa-{t:02d}-{v}"
            dx_corpus[xid] = world.marked_doc(t, _EX_MARKERS)
            xids.append(xid)
        def_ids.append(dids)
        ex_ids.append(xids)
    dx_queries = {
        f"qry-{t:02d}-{j}": world.query_text(t) for t in range(T) for j in range(2)
    }
    defs = TaskDataset(
        TaskKind.RETRIEVAL,
        "defs",
        RetrievalData(
            dict(dx_corpus),
            dict(dx_queries),
            {qid: {d: 1 for d in def_ids[int(qid[4:6])]} for qid in dx_queries},
        ),
    )
    usages = TaskDataset(
        TaskKind.RETRIEVAL,
        "usages",
        RetrievalData(
            dict(dx_corpus),
            dict(dx_queries),
            {qid: {d: 1 for d in ex_ids[int(qid[4:6])]} for qid in dx_queries},
        ),
    )
    twotask_pairs = []
    for t in range(T):
        for _ in range(4):
            d = dx_corpus[def_ids[t][int(world.rng.integers(2))]]
            x = dx_corpus[ex_ids[t][int(world.rng.integers(2))]]
            twotask_pairs.append(
                LabeledTaskPair(TextPair(world.query_text(t), d, "qa"), "def", x)
            )
            twotask_pairs.append(
                LabeledTaskPair(TextPair(world.query_text(t), x, "qa"), "ex", d)
            )

    # Structured documents exercising the curation pipeline end to end.
    structured = []
    for t in range(T):
        structured.append(
            {
                "title": world.query_text(t),
                "sections": [
                    {"subtitle": world.query_text(t), "passage": world.doc_text(t)},
                    {"subtitle": None, "passage": world.doc_text(t)},
                ],
                "qa": [{"q": world.query_text(t), "a": world.doc_text(t)}],
                "source": "synth",
            }
        )
    structured.append({"title": "junk", "sections": [{"subtitle": None, "passage": "!!! ??? ***"}], "qa": [{"q": "junk", "a": "#### ////"}], "source": "synth"})
    if structured:
        structured.append(dict(structured[0]))  # exact duplicate for the dedup stage

    return SynthSuite(
        tasks=[retrieval, sts, pair_classification, classification, reranking, clustering],
        twotask_datasets=[defs, usages],
        unlabeled_pairs=unlabeled,
        labeled_pairs=labeled,
        twotask_pairs=twotask_pairs,
        pretrain_texts=pretrain_texts,
        instructions=dict(INSTRUCTIONS),
        structured_docs=structured,
    )


def write_suite(suite: SynthSuite, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def dataset_path(base: Path, ds: TaskDataset) -> Path:
        if ds.kind in (TaskKind.RETRIEVAL, TaskKind.CLASSIFICATION):
            return base / f"{ds.name}.{ds.kind.value}"
        return base / f"{ds.name}.{ds.kind.value}.jsonl"

    for ds in suite.tasks:
        path = dataset_path(out, ds)
        write_task_dataset(ds, path)
        written.append(path)
    twotask = out / "twotask"
    for ds in suite.twotask_datasets:
        path = dataset_path(twotask, ds)
        write_task_dataset(ds, path)
        written.append(path)

    write_text_pairs(suite.unlabeled_pairs, out / "pairs.unlabeled.jsonl")
    write_labeled_pairs(suite.labeled_pairs, out / "pairs.labeled.jsonl")
    write_labeled_pairs(suite.twotask_pairs, twotask / "pairs.labeled.jsonl")
    (out / "pretrain.txt").write_text(
        "".join(t + "\n" for t in suite.pretrain_texts), encoding="utf-8"
    )
    (out / "instructions.json").write_text(
        json.dumps(suite.instructions, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    with open(out / "docs.structured.jsonl", "w", encoding="utf-8") as fh:
        for doc in suite.structured_docs:
            fh.write(json.dumps(doc, ensure_ascii=False) + "\n")
    written += [
        out / "pairs.unlabeled.jsonl",
        out / "pairs.labeled.jsonl",
        twotask / "pairs.labeled.jsonl",
        out / "pretrain.txt",
        out / "instructions.json",
        out / "docs.structured.jsonl",
    ]
    return written
