"""Text-pair curation: structure extraction, general filtering, semantic filtering.

Input records are line-delimited JSON. Two shapes are accepted:

* structured documents
  {"title": str?, "sections": [{"subtitle": str?, "passage": str}],
   "qa": [{"q": str, "a": str}], "source": str} -> pairs are extracted;
* ready-made pairs {"query": str, "passage": str, ...} -> passed straight to
  filtering, which makes the pipeline idempotent on its own output.

The semantic stage keeps a pair iff scorer(pair) >= threshold, so a score
sitting exactly on the threshold is kept.
"""

from __future__ import annotations

import json
import os
import unicodedata
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .datamodel import (
    FormatError,
    TextPair,
    ValidationError,
    _get,
    _iter_records,
    text_pair_record,
)

DEFAULT_SEMANTIC_THRESHOLD = 0.43


@dataclass(frozen=True)
class StructuredDoc:
    """A document with extractable (query, passage) structure."""

    title: str | None = None
    sections: tuple[tuple[str | None, str], ...] = ()
    qa_items: tuple[tuple[str, str], ...] = ()
    source: str = ""

    def __post_init__(self) -> None:
        if not (self.title or self.sections or self.qa_items):
            raise ValidationError("StructuredDoc needs a title, sections, or qa items")


@dataclass
class FilterStats:
    blocklist: int = 0
    length: int = 0
    non_textual: int = 0
    duplicates: int = 0
    below_threshold: int = 0
    scorer_error: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "blocklist": self.blocklist,
            "length": self.length,
            "non_textual": self.non_textual,
            "duplicates": self.duplicates,
            "below_threshold": self.below_threshold,
            "scorer_error": self.scorer_error,
        }

    def total(self) -> int:
        return sum(self.as_dict().values())


@dataclass
class FilterConfig:
    min_chars: int = 4
    max_chars: int = 8192
    min_informative_ratio: float = 0.5
    dedup: bool = True
    semantic_threshold: float = DEFAULT_SEMANTIC_THRESHOLD
    scorer: Callable[[TextPair], float] | None = None
    blocklist: Callable[[TextPair], bool] | None = None

    def __post_init__(self) -> None:
        if self.min_chars > self.max_chars:
            raise ValidationError("min_chars must be <= max_chars")
        if not 0.0 <= self.semantic_threshold <= 1.0:
            raise ValidationError("semantic_threshold must lie in [0, 1]")
        if not 0.0 <= self.min_informative_ratio <= 1.0:
            raise ValidationError("min_informative_ratio must lie in [0, 1]")


@dataclass(frozen=True)
class CurationReport:
    raw: int
    after_general: int
    after_semantic: int
    drops: dict[str, int]

    def as_dict(self) -> dict:
        return {
            "raw": self.raw,
            "after_general": self.after_general,
            "after_semantic": self.after_semantic,
            "drops": self.drops,
        }


def parse_structured_doc(obj: dict, path="<memory>", lineno: int = 0) -> StructuredDoc:
    title = obj.get("title")
    if title is not None and not isinstance(title, str):
        raise FormatError(f"{path}:{lineno}: title must be a string")
    sections = []
    for sec in obj.get("sections", []):
        if not isinstance(sec, dict):
            raise FormatError(f"{path}:{lineno}: section is not an object")
        subtitle = sec.get("subtitle")
        passage = sec.get("passage")
        if not isinstance(passage, str):
            raise FormatError(f"{path}:{lineno}: section passage must be a string")
        sections.append((subtitle, passage))
    qa = []
    for item in obj.get("qa", []):
        if not isinstance(item, dict) or not isinstance(item.get("q"), str) or not isinstance(item.get("a"), str):
            raise FormatError(f"{path}:{lineno}: qa item needs string keys 'q' and 'a'")
        qa.append((item["q"], item["a"]))
    source = obj.get("source", "")
    try:
        return StructuredDoc(title, tuple(sections), tuple(qa), source)
    except ValidationError as exc:
        raise ValidationError(f"{path}:{lineno}: {exc}") from exc


def _make_pair(query: str, passage: str, source: str) -> TextPair | None:
    query = query.strip()
    passage = passage.strip()
    if not query or not passage:
        return None
    return TextPair(query, passage, source)


def extract_pairs(doc: StructuredDoc) -> list[TextPair]:
    """Emit (title, body), (subtitle, passage) and (q, a) pairs in that order.

    The body is the newline-joined concatenation of all section passages.
    Candidates with an empty side are silently skipped.
    """
    pairs: list[TextPair] = []
    if doc.title and doc.sections:
        body = "\n".join(passage for _, passage in doc.sections)
        pair = _make_pair(doc.title, body, "title-body")
        if pair:
            pairs.append(pair)
    for subtitle, passage in doc.sections:
        if subtitle:
            pair = _make_pair(subtitle, passage, "subtitle-passage")
            if pair:
                pairs.append(pair)
    for question, answer in doc.qa_items:
        pair = _make_pair(question, answer, "qa")
        if pair:
            pairs.append(pair)
    return pairs


def _informative_ratio(text: str) -> float:
    informative = 0
    total = 0
    for ch in text:
        if ch.isspace():
            continue
        total += 1
        if ch.isalnum():
            informative += 1
    if total == 0:
        return 0.0
    return informative / total


def normalized_text(text: str) -> str:
    """NFC, lowercased, whitespace-collapsed form used for dedup and equality."""
    return " ".join(unicodedata.normalize("NFC", text).lower().split())


def _dedup_key(pair: TextPair) -> str:
    return normalized_text(pair.query) + "\x1f" + normalized_text(pair.passage)


def general_filter(
    pairs: Iterable[TextPair], cfg: FilterConfig
) -> tuple[Iterator[TextPair], FilterStats]:
    """Drop out-of-length, non-textual, blocklisted and duplicate pairs.

    Returns a lazy stream plus a stats object that is complete once the
    stream has been consumed.
    """
    stats = FilterStats()

    def gen() -> Iterator[TextPair]:
        seen: set[str] = set()
        for pair in pairs:
            if cfg.blocklist is not None and cfg.blocklist(pair):
                stats.blocklist += 1
                continue
            if not all(
                cfg.min_chars <= len(side) <= cfg.max_chars
                for side in (pair.query, pair.passage)
            ):
                stats.length += 1
                continue
            if (
                _informative_ratio(pair.query) < cfg.min_informative_ratio
                or _informative_ratio(pair.passage) < cfg.min_informative_ratio
            ):
                stats.non_textual += 1
                continue
            if cfg.dedup:
                key = _dedup_key(pair)
                if key in seen:
                    stats.duplicates += 1
                    continue
                seen.add(key)
            yield pair

    return gen(), stats


def semantic_filter(
    pairs: Iterable[TextPair], cfg: FilterConfig
) -> tuple[Iterator[TextPair], FilterStats]:
    """Score each pair and keep it iff score >= cfg.semantic_threshold."""
    if cfg.scorer is None:
        raise ValidationError("semantic_filter needs cfg.scorer")
    stats = FilterStats()

    def gen() -> Iterator[TextPair]:
        for pair in pairs:
            try:
                score = float(cfg.scorer(pair))
            except Exception:
                stats.scorer_error += 1
                continue
            if score >= cfg.semantic_threshold:
                yield replace(pair, score=score)
            else:
                stats.below_threshold += 1

    return gen(), stats


def builtin_overlap_scorer(pair: TextPair) -> float:
    """Jaccard similarity of the character-bigram sets of the two sides."""
    a = {pair.query[i : i + 2] for i in range(len(pair.query) - 1)}
    b = {pair.passage[i : i + 2] for i in range(len(pair.passage) - 1)}
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


def _iter_input_pairs(paths: Iterable[Path]) -> Iterator[TextPair]:
    for path in paths:
        for lineno, obj in _iter_records(path):
            if "query" in obj and "passage" in obj:
                query = _get(obj, "query", path, lineno)
                passage = _get(obj, "passage", path, lineno)
                try:
                    pair = _make_pair(query, passage, obj.get("source", ""))
                except ValidationError as exc:
                    raise ValidationError(f"{path}:{lineno}: {exc}") from exc
                if pair:
                    yield pair
            else:
                yield from extract_pairs(parse_structured_doc(obj, path, lineno))


def run_pipeline(input_paths, cfg: FilterConfig, out_path) -> CurationReport:
    """extract -> general_filter -> semantic_filter, streaming to out_path.

    Output is written through a temporary file and renamed on success, so a
    failing run leaves no partial output behind.
    """
    paths = [Path(p) for p in (input_paths if isinstance(input_paths, (list, tuple)) else [input_paths])]
    for p in paths:
        if not p.is_file():
            raise FileNotFoundError(f"input file {p} does not exist")
    if cfg.scorer is None:
        cfg = replace(cfg, scorer=builtin_overlap_scorer)

    raw_count = 0

    def counted() -> Iterator[TextPair]:
        nonlocal raw_count
        for pair in _iter_input_pairs(paths):
            raw_count += 1
            yield pair

    general_stream, general_stats = general_filter(counted(), cfg)
    semantic_stream, semantic_stats = semantic_filter(general_stream, cfg)

    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    kept = 0
    try:
        with open(tmp, "w", encoding="utf-8") as fh:
            for pair in semantic_stream:
                fh.write(json.dumps(text_pair_record(pair), ensure_ascii=False) + "\n")
                kept += 1
        os.replace(tmp, out)
    finally:
        if tmp.exists():
            tmp.unlink()

    drops = {k: v for k, v in general_stats.as_dict().items() if v} | {
        k: v for k, v in semantic_stats.as_dict().items() if v
    }
    after_general = raw_count - general_stats.total()
    return CurationReport(raw_count, after_general, kept, drops)
