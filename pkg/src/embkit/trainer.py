"""Three-stage training: masked-reconstruction pre-training, contrastive
fine-tuning on in-batch negatives, and instruction-prefixed task fine-tuning
with mined hard negatives.

The optimizer is plain SGD with a constant learning rate so every update is
reproducible and every gradient can be checked against finite differences.
Batch shaping, masking and negative sampling all draw from generators seeded
by the config, which makes checkpoints bit-deterministic.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .curation import normalized_text
from .datamodel import TextPair, ValidationError, _get, _iter_records
from .encoder import (
    EncoderModel,
    backward_token_batch,
    copy_model,
    encode,
    forward_token_batch,
    pack_token_seqs,
    save_model,
    tokenize,
    with_instruction,
)

STAGES = ("pretrain", "general", "taskspecific")


@dataclass
class TrainConfig:
    stage: str
    batch_size: int = 32
    temperature: float = 0.05
    learning_rate: float = 0.1
    steps: int = 100
    seed: int = 0
    mask_ratio: float = 0.3
    instructions: dict[str, str] = field(default_factory=dict)
    hard_negative_rank_window: tuple[int, int] = (2, 100)
    remine_every: int | None = None

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ValidationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.stage == "general" and self.batch_size < 2:
            raise ValidationError("in-batch negatives need batch_size >= 2")
        if self.temperature <= 0:
            raise ValidationError("temperature must be > 0")
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        if self.steps < 0:
            raise ValidationError("steps must be >= 0")
        if self.stage == "pretrain" and not 0.0 < self.mask_ratio < 1.0:
            raise ValidationError("mask_ratio must lie in (0, 1)")
        lo, hi = self.hard_negative_rank_window
        if not 1 <= lo <= hi:
            raise ValidationError("hard_negative_rank_window must satisfy 1 <= lo <= hi")

    def as_dict(self) -> dict:
        return {
            "stage": self.stage,
            "batch_size": self.batch_size,
            "temperature": self.temperature,
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "seed": self.seed,
            "mask_ratio": self.mask_ratio,
            "instructions": dict(self.instructions),
            "hard_negative_rank_window": list(self.hard_negative_rank_window),
            "remine_every": self.remine_every,
        }


@dataclass(frozen=True)
class LabeledTaskPair:
    pair: TextPair
    task_tag: str
    hard_negative: str | None = None


@dataclass
class LossCurve:
    points: list[tuple[int, float]] = field(default_factory=list)

    def add(self, step: int, loss: float) -> None:
        self.points.append((step, loss))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            writer.writerows(self.points)


@dataclass
class MiningStats:
    fallbacks: int = 0


# ---------------------------------------------------------------------------
# InfoNCE
# ---------------------------------------------------------------------------

@dataclass
class InfoNceResult:
    loss: float
    grad_query: np.ndarray
    grad_passage: np.ndarray
    grad_hard: np.ndarray | None = None


def _as_unit_rows(x, name: str) -> np.ndarray:
    arr = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    norms = np.linalg.norm(arr, axis=1)
    if arr.shape[0] and np.abs(norms - 1.0).max() > 1e-3:
        worst = int(np.abs(norms - 1.0).argmax())
        raise ValueError(f"{name} row {worst} has norm {norms[worst]!r}, expected unit rows")
    return arr


def info_nce(
    query_embs,
    passage_embs,
    temperature: float,
    hard_negative_embs=None,
) -> InfoNceResult:
    """Mean over rows i of -log softmax(<q_i, p_j>/t)_i over in-batch columns j.

    Row i's positive is column i; every other column is an in-batch negative.
    When hard negatives are given, row i's denominator additionally includes
    its own hard negative <q_i, h_i>/t. Logits are stabilized by row-max
    subtraction; gradients are exact.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    q = _as_unit_rows(query_embs, "query_embs")
    p = _as_unit_rows(passage_embs, "passage_embs")
    if q.shape != p.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {p.shape}")
    b = q.shape[0]
    if b < 1:
        raise ValueError("batch must contain at least one row")
    h = None
    if hard_negative_embs is not None:
        h = _as_unit_rows(hard_negative_embs, "hard_negative_embs")
        if h.shape != q.shape:
            raise ValueError("hard negatives must match the batch shape")

    logits = q @ p.T / temperature  # (B, B)
    if h is not None:
        extra = np.sum(q * h, axis=1, keepdims=True) / temperature  # (B, 1)
        logits = np.concatenate([logits, extra], axis=1)
    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    exp = np.exp(shifted)
    denom = exp.sum(axis=1, keepdims=True)
    diag = shifted[np.arange(b), np.arange(b)]
    losses = np.log(denom[:, 0]) - diag
    loss = float(losses.mean())

    soft = exp / denom
    dlogits = soft.copy()
    dlogits[np.arange(b), np.arange(b)] -= 1.0
    dlogits /= b * temperature

    grad_q = dlogits[:, :b] @ p
    grad_p = dlogits[:, :b].T @ q
    grad_h = None
    if h is not None:
        grad_q = grad_q + dlogits[:, b:] * h
        grad_h = dlogits[:, b:] * q
    return InfoNceResult(loss, grad_q, grad_p, grad_h)


# ---------------------------------------------------------------------------
# Shared training plumbing
# ---------------------------------------------------------------------------

def attach_instruction(query: str, task_tag: str, cfg: TrainConfig) -> str:
    """instruction + ' ' + query; the registered empty instruction is a no-op."""
    if task_tag not in cfg.instructions:
        raise ValidationError(f"no instruction registered for task {task_tag!r}")
    return with_instruction(cfg.instructions[task_tag], query)


def _epoch_batches(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """Yield `steps` index batches, reshuffling a fresh permutation per epoch.

    A trailing slice smaller than batch_size is dropped (n >= batch_size is
    validated by the callers)."""
    done = 0
    while done < steps:
        perm = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield perm[lo : lo + batch_size]
            done += 1
            if done >= steps:
                return


def _sgd_contrastive_step(
    model: EncoderModel,
    q_seqs: Sequence[Sequence[int]],
    p_seqs: Sequence[Sequence[int]],
    temperature: float,
    learning_rate: float,
    grad_table: np.ndarray,
    grad_projection: np.ndarray,
    h_seqs: Sequence[Sequence[int]] | None = None,
) -> float:
    cq = forward_token_batch(model.token_table, model.projection, pack_token_seqs(q_seqs))
    cp = forward_token_batch(model.token_table, model.projection, pack_token_seqs(p_seqs))
    ch = None
    if h_seqs is not None:
        ch = forward_token_batch(model.token_table, model.projection, pack_token_seqs(h_seqs))
    result = info_nce(
        cq.embeddings, cp.embeddings, temperature, ch.embeddings if ch is not None else None
    )
    grad_table[:] = 0.0
    grad_projection[:] = 0.0
    backward_token_batch(model.projection, cq, result.grad_query, grad_table, grad_projection)
    backward_token_batch(model.projection, cp, result.grad_passage, grad_table, grad_projection)
    if ch is not None:
        backward_token_batch(model.projection, ch, result.grad_hard, grad_table, grad_projection)
    model.token_table -= learning_rate * grad_table
    model.projection -= learning_rate * grad_projection
    return result.loss


def train_general(
    model: EncoderModel, pairs: Iterable[TextPair], cfg: TrainConfig
) -> tuple[EncoderModel, LossCurve]:
    """Contrastive fine-tuning that relies purely on in-batch negatives."""
    if cfg.stage != "general":
        raise ValidationError(f"expected stage 'general', got {cfg.stage!r}")
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no training pairs given")
    if len(pairs) < cfg.batch_size:
        raise ValidationError(f"{len(pairs)} pairs < batch_size {cfg.batch_size}")
    model = copy_model(model)
    q_seqs = [tokenize(p.query, model.tokenizer, model.vocab_buckets) for p in pairs]
    p_seqs = [tokenize(p.passage, model.tokenizer, model.vocab_buckets) for p in pairs]
    grad_table = np.zeros_like(model.token_table)
    grad_projection = np.zeros_like(model.projection)
    rng = np.random.default_rng(cfg.seed)
    curve = LossCurve()
    for step, idx in enumerate(_epoch_batches(len(pairs), cfg.batch_size, cfg.steps, rng)):
        loss = _sgd_contrastive_step(
            model,
            [q_seqs[i] for i in idx],
            [p_seqs[i] for i in idx],
            cfg.temperature,
            cfg.learning_rate,
            grad_table,
            grad_projection,
        )
        curve.add(step, loss)
    return model, curve


def train_taskspecific(
    model: EncoderModel,
    pairs: Iterable[LabeledTaskPair],
    cfg: TrainConfig,
    corpus: Sequence[str] | None = None,
) -> tuple[EncoderModel, LossCurve]:
    """Instruction-prefixed fine-tuning; each row contributes its own hard
    negative to the softmax denominator on top of the in-batch passages.

    Pairs may arrive pre-mined; otherwise a passage pool must be given and
    negatives are mined up front and re-mined every cfg.remine_every steps.
    """
    if cfg.stage != "taskspecific":
        raise ValidationError(f"expected stage 'taskspecific', got {cfg.stage!r}")
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no training pairs given")
    if len(pairs) < cfg.batch_size:
        raise ValidationError(f"{len(pairs)} pairs < batch_size {cfg.batch_size}")
    missing = sorted({p.task_tag for p in pairs} - set(cfg.instructions))
    if missing:
        raise ValidationError(f"no instruction registered for tags {missing}")
    need_mining = any(p.hard_negative is None for p in pairs)
    if need_mining and corpus is None:
        raise ValidationError("pairs lack hard negatives and no mining corpus was given")

    model = copy_model(model)
    if need_mining:
        pairs, _ = mine_hard_negatives(model, pairs, corpus, cfg)
    for i, p in enumerate(pairs):
        if normalized_text(p.hard_negative) == normalized_text(p.pair.passage):
            raise ValidationError(f"pair {i}: hard negative equals the positive passage")

    queries = [attach_instruction(p.pair.query, p.task_tag, cfg) for p in pairs]
    q_seqs = [tokenize(q, model.tokenizer, model.vocab_buckets) for q in queries]
    p_seqs = [tokenize(p.pair.passage, model.tokenizer, model.vocab_buckets) for p in pairs]
    h_seqs = [tokenize(p.hard_negative, model.tokenizer, model.vocab_buckets) for p in pairs]
    grad_table = np.zeros_like(model.token_table)
    grad_projection = np.zeros_like(model.projection)
    rng = np.random.default_rng(cfg.seed)
    curve = LossCurve()
    for step, idx in enumerate(_epoch_batches(len(pairs), cfg.batch_size, cfg.steps, rng)):
        if cfg.remine_every and corpus is not None and step and step % cfg.remine_every == 0:
            pairs, _ = mine_hard_negatives(model, pairs, corpus, cfg)
            h_seqs = [
                tokenize(p.hard_negative, model.tokenizer, model.vocab_buckets) for p in pairs
            ]
        loss = _sgd_contrastive_step(
            model,
            [q_seqs[i] for i in idx],
            [p_seqs[i] for i in idx],
            cfg.temperature,
            cfg.learning_rate,
            grad_table,
            grad_projection,
            [h_seqs[i] for i in idx],
        )
        curve.add(step, loss)
    return model, curve


# ---------------------------------------------------------------------------
# Hard-negative mining
# ---------------------------------------------------------------------------

def mine_hard_negatives(
    model: EncoderModel,
    pairs: Sequence[LabeledTaskPair],
    corpus: Sequence[str],
    cfg: TrainConfig,
) -> tuple[list[LabeledTaskPair], MiningStats]:
    """Rank the pool by cosine to each (instructed) query with the current
    model, drop entries textually equal to the positive, then sample one
    negative uniformly from the 1-based rank window (clipped to the pool).

    An empty window falls back to the highest-ranked non-positive and bumps
    stats.fallbacks."""
    lo, hi = cfg.hard_negative_rank_window
    corpus = list(corpus)
    if not corpus:
        raise ValidationError("mining needs a non-empty passage pool")
    corpus_embs = encode(model, corpus, side="passage").data
    queries = [
        attach_instruction(p.pair.query, p.task_tag, cfg)
        if p.task_tag in cfg.instructions
        else p.pair.query
        for p in pairs
    ]
    query_embs = encode(model, queries, side="query").data
    sims = query_embs @ corpus_embs.T
    corpus_keys = [normalized_text(text) for text in corpus]
    rng = np.random.default_rng([cfg.seed, 0x4E])
    stats = MiningStats()
    mined: list[LabeledTaskPair] = []
    order_index = np.arange(len(corpus))
    for i, pair in enumerate(pairs):
        order = np.lexsort((order_index, -sims[i]))  # desc score, asc index
        positive_key = normalized_text(pair.pair.passage)
        ranked = [j for j in order if corpus_keys[j] != positive_key]
        if not ranked:
            raise ValidationError(f"pair {i}: pool contains only the positive passage")
        window = ranked[lo - 1 : hi]
        if window:
            choice = window[int(rng.integers(len(window)))]
        else:
            choice = ranked[0]
            stats.fallbacks += 1
        mined.append(replace(pair, hard_negative=corpus[choice]))
    return mined, stats


# ---------------------------------------------------------------------------
# Masked-reconstruction pre-training
# ---------------------------------------------------------------------------

def init_decoder(model: EncoderModel, seed: int) -> np.ndarray:
    """Single linear map out_dim -> vocab logits; the lightest decoder that
    can reconstruct bucket ids from one embedding."""
    rng = np.random.default_rng([seed, 0xDEC])
    scale = 0.5 / model.out_dim
    return rng.uniform(-scale, scale, size=(model.out_dim, model.vocab_buckets))


def _mae_loss_and_grads(
    token_table: np.ndarray,
    projection: np.ndarray,
    decoder: np.ndarray,
    seqs: Sequence[Sequence[int]],
    masks: Sequence[Sequence[int]],
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    polluted = []
    for seq, mask in zip(seqs, masks):
        s = list(seq)
        for pos in mask:
            s[pos] = 0
        polluted.append(s)
    cache = forward_token_batch(token_table, projection, pack_token_seqs(polluted))
    logits = cache.embeddings @ decoder  # (B, V)
    row_max = logits.max(axis=1, keepdims=True)
    shifted = logits - row_max
    log_denom = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_denom
    probs = np.exp(log_probs)

    total_masked = sum(len(m) for m in masks)
    loss = 0.0
    dlogits = np.zeros_like(logits)
    for i, (seq, mask) in enumerate(zip(seqs, masks)):
        dlogits[i] = len(mask) * probs[i]
        for pos in mask:
            true_id = seq[pos]
            loss -= log_probs[i, true_id]
            dlogits[i, true_id] -= 1.0
    loss /= total_masked
    dlogits /= total_masked

    grad_decoder = cache.embeddings.T @ dlogits
    grad_embeddings = dlogits @ decoder.T
    grad_table = np.zeros_like(token_table)
    grad_projection = np.zeros_like(projection)
    backward_token_batch(projection, cache, grad_embeddings, grad_table, grad_projection)
    return loss, grad_table, grad_projection, grad_decoder


def draw_masks(
    seqs: Sequence[Sequence[int]], mask_ratio: float, rng: np.random.Generator
) -> list[list[int]]:
    """ceil(mask_ratio * len) positions per sequence, at least one."""
    masks = []
    for seq in seqs:
        count = max(1, math.ceil(mask_ratio * len(seq)))
        masks.append(sorted(int(j) for j in rng.choice(len(seq), size=count, replace=False)))
    return masks


def mae_pretrain_step(
    model: EncoderModel,
    decoder: np.ndarray,
    texts: Sequence[str],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, int]:
    """One masked-reconstruction step; updates model and decoder in place.

    Texts shorter than two tokens are skipped; returns (loss, skipped)."""
    seqs = [tokenize(t, model.tokenizer, model.vocab_buckets) for t in texts]
    usable = [s for s in seqs if len(s) >= 2]
    skipped = len(seqs) - len(usable)
    if not usable:
        raise ValidationError("no text in the batch has at least two tokens")
    masks = draw_masks(usable, cfg.mask_ratio, rng)
    loss, grad_table, grad_projection, grad_decoder = _mae_loss_and_grads(
        model.token_table, model.projection, decoder, usable, masks
    )
    model.token_table -= cfg.learning_rate * grad_table
    model.projection -= cfg.learning_rate * grad_projection
    decoder -= cfg.learning_rate * grad_decoder
    return loss, skipped


def train_pretrain(
    model: EncoderModel, texts: Iterable[str], cfg: TrainConfig
) -> tuple[EncoderModel, LossCurve]:
    """Masked-reconstruction pre-training; the decoder is discarded at the end."""
    if cfg.stage != "pretrain":
        raise ValidationError(f"expected stage 'pretrain', got {cfg.stage!r}")
    texts = list(texts)
    if not texts:
        raise ValidationError("no pre-training texts given")
    if len(texts) < cfg.batch_size:
        raise ValidationError(f"{len(texts)} texts < batch_size {cfg.batch_size}")
    model = copy_model(model)
    decoder = init_decoder(model, cfg.seed)
    rng = np.random.default_rng([cfg.seed, 0x3A])
    batch_rng = np.random.default_rng(cfg.seed)
    curve = LossCurve()
    for step, idx in enumerate(_epoch_batches(len(texts), cfg.batch_size, cfg.steps, batch_rng)):
        loss, _ = mae_pretrain_step(model, decoder, [texts[i] for i in idx], cfg, rng)
        curve.add(step, loss)
    return model, curve


# ---------------------------------------------------------------------------
# Checkpoints, labeled-pair files, full recipe
# ---------------------------------------------------------------------------

def write_checkpoint(model: EncoderModel, cfg: TrainConfig | None, path) -> None:
    """Model file plus a sidecar JSON of the config that produced it."""
    path = Path(path)
    save_model(model, path)
    sidecar = path.with_name(path.stem + ".config.json")
    payload = cfg.as_dict() if cfg is not None else None
    sidecar.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def load_labeled_pairs(path) -> list[LabeledTaskPair]:
    p = Path(path)
    out = []
    for lineno, obj in _iter_records(p):
        query = _get(obj, "query", p, lineno)
        passage = _get(obj, "passage", p, lineno)
        task = _get(obj, "task", p, lineno)
        neg = obj.get("neg")
        try:
            pair = TextPair(query, passage, obj.get("source", ""), obj.get("score"))
        except ValidationError as exc:
            raise ValidationError(f"{p}:{lineno}: {exc}") from exc
        out.append(LabeledTaskPair(pair, task, neg))
    return out


def write_labeled_pairs(pairs: Iterable[LabeledTaskPair], path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8") as fh:
        for lp in pairs:
            rec = {
                "query": lp.pair.query,
                "passage": lp.pair.passage,
                "source": lp.pair.source,
                "task": lp.task_tag,
            }
            if lp.pair.score is not None:
                rec["score"] = lp.pair.score
            if lp.hard_negative is not None:
                rec["neg"] = lp.hard_negative
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def run_recipe(
    texts: Sequence[str],
    unlabeled_pairs: Sequence[TextPair],
    labeled_pairs: Sequence[LabeledTaskPair],
    cfgs: Sequence[TrainConfig],
    model: EncoderModel,
    out_dir=None,
    mining_corpus: Sequence[str] | None = None,
) -> tuple[EncoderModel, EncoderModel, EncoderModel]:
    """Chain the three stages, checkpointing after each when out_dir is given.

    Any stage failure propagates after earlier checkpoints are on disk, so the
    last good model survives an aborted run."""
    cfg_pre, cfg_gen, cfg_task = cfgs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    def checkpoint(m: EncoderModel, cfg: TrainConfig, name: str, curve: LossCurve | None) -> None:
        if out is None:
            return
        write_checkpoint(m, cfg, out / f"{name}.embm")
        if curve is not None:
            curve.write_csv(out / f"{name}.loss.csv")

    if cfg_pre.steps > 0:
        model_pretrain, curve = train_pretrain(model, texts, cfg_pre)
    else:
        model_pretrain, curve = copy_model(model), None
    checkpoint(model_pretrain, cfg_pre, "model_pretrain", curve)

    if cfg_gen.steps > 0:
        model_general, curve = train_general(model_pretrain, unlabeled_pairs, cfg_gen)
    else:
        model_general, curve = copy_model(model_pretrain), None
    checkpoint(model_general, cfg_gen, "model_general", curve)

    if cfg_task.steps > 0:
        model_finetune, curve = train_taskspecific(
            model_general, labeled_pairs, cfg_task, mining_corpus
        )
    else:
        model_finetune, curve = copy_model(model_general), None
    checkpoint(model_finetune, cfg_task, "model_finetune", curve)
    return model_pretrain, model_general, model_finetune
