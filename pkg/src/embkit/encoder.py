"""Hash-bucket text encoder with closed-form gradients.

The architecture is deliberately small: tokens hash into a bucketed embedding
table, rows are mean-pooled, projected by a linear map, and L2-normalized.
Every stage has an analytic Jacobian (the normalization one is
(I - e e^T) / ||y||), so training needs no autodiff framework.

Also provides a client and a serve loop for the external-encoder line
protocol: handshake {"dim": int}, then one request
{"texts": [...], "side": "query"|"passage"} and one response
{"embeddings": [[...], ...]} per line over the subprocess's stdio. stderr is
logged, never parsed.
"""

from __future__ import annotations

import json
import logging
import queue
import shlex
import struct
import subprocess
import threading
import unicodedata
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from .datamodel import EmbeddingMatrix, FormatError

log = logging.getLogger(__name__)

MODEL_MAGIC = b"EMBM"
MODEL_VERSION = 1

# Bucket 0 is reserved: empty text tokenizes to [0] and masked positions are
# replaced by it. Real tokens may still collide into it; collisions share
# embeddings by construction.
RESERVED_BUCKET = 0

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

_CJK_RANGES = ((0x3400, 0x4DBF), (0x4E00, 0x9FFF), (0xF900, 0xFAFF))

# Rows whose pre-normalization vector vanished and were substituted by e1.
_zero_substitutions = 0


def zero_substitution_count() -> int:
    return _zero_substitutions


@lru_cache(maxsize=1 << 16)
def fnv1a_64(token: str) -> int:
    """FNV-1a 64-bit hash of the token's UTF-8 bytes."""
    h = _FNV_OFFSET
    for b in token.encode("utf-8"):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


@dataclass(frozen=True)
class TokenizerConfig:
    lowercase: bool = True
    cjk_per_char: bool = True


def tokenize(text: str, cfg: TokenizerConfig, vocab_buckets: int) -> list[int]:
    """NFC-normalize, split on whitespace (and per CJK character when enabled),
    then hash every token into [0, vocab_buckets). Empty text maps to [0]."""
    text = unicodedata.normalize("NFC", text)
    if cfg.lowercase:
        text = text.lower()
    words: list[str] = []
    for chunk in text.split():
        if cfg.cjk_per_char and any(_is_cjk(c) for c in chunk):
            run: list[str] = []
            for ch in chunk:
                if _is_cjk(ch):
                    if run:
                        words.append("".join(run))
                        run = []
                    words.append(ch)
                else:
                    run.append(ch)
            if run:
                words.append("".join(run))
        else:
            words.append(chunk)
    if not words:
        return [RESERVED_BUCKET]
    return [fnv1a_64(w) % vocab_buckets for w in words]


def with_instruction(instruction: str | None, text: str) -> str:
    """Prefix form, single-space separator; empty instruction is a no-op."""
    if not instruction:
        return text
    return f"{instruction} {text}"


@dataclass
class EncoderModel:
    vocab_buckets: int
    embed_dim: int
    out_dim: int
    token_table: np.ndarray  # (V, d_in) float64
    projection: np.ndarray  # (d_in, d_out) float64
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.vocab_buckets, self.embed_dim, self.out_dim) < 1:
            raise ValueError("vocab_buckets, embed_dim and out_dim must be >= 1")
        self.token_table = np.asarray(self.token_table, dtype=np.float64)
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if self.token_table.shape != (self.vocab_buckets, self.embed_dim):
            raise ValueError("token_table shape mismatch")
        if self.projection.shape != (self.embed_dim, self.out_dim):
            raise ValueError("projection shape mismatch")
        if not (np.isfinite(self.token_table).all() and np.isfinite(self.projection).all()):
            raise ValueError("model parameters must be finite")


def init_model(
    vocab_buckets: int = 32768,
    embed_dim: int = 64,
    out_dim: int = 64,
    seed: int = 0,
    tokenizer: TokenizerConfig | None = None,
) -> EncoderModel:
    """Seeded init: token table ~ U(-0.5/d_in, 0.5/d_in), identity-padded projection.

    Fresh values are snapped to the f32 grid so a fresh checkpoint round-trips
    bit-exactly through the f32 model file.
    """
    rng = np.random.default_rng(seed)
    scale = 0.5 / embed_dim
    table = rng.uniform(-scale, scale, size=(vocab_buckets, embed_dim))
    table = table.astype(np.float32).astype(np.float64)
    projection = np.eye(embed_dim, out_dim, dtype=np.float64)
    return EncoderModel(
        vocab_buckets,
        embed_dim,
        out_dim,
        table,
        projection,
        tokenizer or TokenizerConfig(),
        seed,
    )


def copy_model(model: EncoderModel) -> EncoderModel:
    return EncoderModel(
        model.vocab_buckets,
        model.embed_dim,
        model.out_dim,
        model.token_table.copy(),
        model.projection.copy(),
        model.tokenizer,
        model.seed,
    )


# ---------------------------------------------------------------------------
# Forward / backward over packed token batches
# ---------------------------------------------------------------------------

@dataclass
class TokenBatch:
    flat: np.ndarray  # all token ids, concatenated
    starts: np.ndarray  # start offset of each sequence
    lengths: np.ndarray  # length of each sequence


def pack_token_seqs(seqs: Sequence[Sequence[int]]) -> TokenBatch:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    starts = np.zeros(len(seqs), dtype=np.int64)
    np.cumsum(lengths[:-1], out=starts[1:])
    flat = np.fromiter((t for s in seqs for t in s), dtype=np.int64, count=int(lengths.sum()))
    return TokenBatch(flat, starts, lengths)


@dataclass
class ForwardCache:
    batch: TokenBatch
    pooled: np.ndarray  # (B, d_in) mean of token rows
    projected: np.ndarray  # (B, d_out)
    embeddings: np.ndarray  # (B, d_out) unit rows
    norms: np.ndarray  # (B,) with zero rows replaced by 1.0
    zero_rows: np.ndarray  # bool mask of substituted rows


def forward_token_batch(
    token_table: np.ndarray, projection: np.ndarray, batch: TokenBatch
) -> ForwardCache:
    global _zero_substitutions
    rows = token_table[batch.flat]
    pooled = np.add.reduceat(rows, batch.starts, axis=0) / batch.lengths[:, None]
    projected = pooled @ projection
    norms = np.linalg.norm(projected, axis=1)
    zero_rows = norms < 1e-30
    safe = np.where(zero_rows, 1.0, norms)
    embeddings = projected / safe[:, None]
    if zero_rows.any():
        embeddings[zero_rows] = 0.0
        embeddings[zero_rows, 0] = 1.0
        _zero_substitutions += int(zero_rows.sum())
        log.warning("substituted e1 for %d zero embedding rows", int(zero_rows.sum()))
    return ForwardCache(batch, pooled, projected, embeddings, safe, zero_rows)


def backward_token_batch(
    projection: np.ndarray,
    cache: ForwardCache,
    grad_embeddings: np.ndarray,
    grad_table: np.ndarray,
    grad_projection: np.ndarray,
) -> None:
    """Accumulate d(loss)/d(token_table) and d(loss)/d(projection) in place."""
    e = cache.embeddings
    dots = np.sum(grad_embeddings * e, axis=1, keepdims=True)
    grad_projected = (grad_embeddings - dots * e) / cache.norms[:, None]
    if cache.zero_rows.any():
        grad_projected[cache.zero_rows] = 0.0  # substituted rows are constants
    grad_projection += cache.pooled.T @ grad_projected
    grad_pooled = grad_projected @ projection.T
    per_token = np.repeat(grad_pooled / cache.batch.lengths[:, None], cache.batch.lengths, axis=0)
    np.add.at(grad_table, cache.batch.flat, per_token)


def encode(
    model: EncoderModel,
    texts: Sequence[str],
    side: str = "passage",
    instruction: str | None = None,
) -> EmbeddingMatrix:
    """Encode texts into unit-norm rows. An instruction, when given, is
    prefixed to query-side texts only."""
    if side not in ("query", "passage"):
        raise ValueError(f"side must be 'query' or 'passage', got {side!r}")
    if side == "query" and instruction:
        texts = [with_instruction(instruction, t) for t in texts]
    if not texts:
        return EmbeddingMatrix(np.zeros((0, model.out_dim)), normalized=True)
    seqs = [tokenize(t, model.tokenizer, model.vocab_buckets) for t in texts]
    cache = forward_token_batch(model.token_table, model.projection, pack_token_seqs(seqs))
    return EmbeddingMatrix(cache.embeddings, normalized=True)


class ModelEncoder:
    """EncoderHandle over an in-process model, with an optional query instruction."""

    def __init__(self, model: EncoderModel, instruction: str | None = None) -> None:
        self.model = model
        self.instruction = instruction
        self.dim = model.out_dim

    def encode(self, texts: Sequence[str], side: str) -> EmbeddingMatrix:
        return encode(self.model, texts, side, self.instruction)


# ---------------------------------------------------------------------------
# Model file IO
# ---------------------------------------------------------------------------

_FLAG_LOWERCASE = 1
_FLAG_CJK = 2


def save_model(model: EncoderModel, path) -> None:
    flags = 0
    if model.tokenizer.lowercase:
        flags |= _FLAG_LOWERCASE
    if model.tokenizer.cjk_per_char:
        flags |= _FLAG_CJK
    header = MODEL_MAGIC + struct.pack(
        "<IIIIQI",
        MODEL_VERSION,
        model.vocab_buckets,
        model.embed_dim,
        model.out_dim,
        model.seed & _MASK64,
        flags,
    )
    body = (
        np.ascontiguousarray(model.token_table, dtype="<f4").tobytes()
        + np.ascontiguousarray(model.projection, dtype="<f4").tobytes()
    )
    Path(path).write_bytes(header + body)


def load_model(path) -> EncoderModel:
    raw = Path(path).read_bytes()
    header_len = 4 + struct.calcsize("<IIIIQI")
    if len(raw) < header_len or raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not an encoder model file")
    version, buckets, d_in, d_out, seed, flags = struct.unpack("<IIIIQI", raw[4:header_len])
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    table_len = 4 * buckets * d_in
    proj_len = 4 * d_in * d_out
    if len(raw) != header_len + table_len + proj_len:
        raise FormatError(f"{path}: parameter payload truncated or oversized")
    table = (
        np.frombuffer(raw, dtype="<f4", count=buckets * d_in, offset=header_len)
        .astype(np.float64)
        .reshape(buckets, d_in)
    )
    projection = (
        np.frombuffer(raw, dtype="<f4", count=d_in * d_out, offset=header_len + table_len)
        .astype(np.float64)
        .reshape(d_in, d_out)
    )
    tokenizer = TokenizerConfig(bool(flags & _FLAG_LOWERCASE), bool(flags & _FLAG_CJK))
    return EncoderModel(buckets, d_in, d_out, table, projection, tokenizer, seed)


# ---------------------------------------------------------------------------
# External encoder protocol
# ---------------------------------------------------------------------------

class ProtocolError(RuntimeError):
    """The external encoder violated the line protocol."""


class EncoderTimeout(ProtocolError):
    """The external encoder did not answer within the deadline."""


class NonFiniteEmbedding(ProtocolError):
    """The external encoder returned NaN or infinity."""


class ExternalEncoder:
    """EncoderHandle speaking the stdio line protocol with a subprocess.

    Requests are serialized per subprocess; run several instances for
    parallelism. Use as a context manager or call close().
    """

    def __init__(self, command: str | Sequence[str], timeout: float = 60.0) -> None:
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = timeout
        self._lock = threading.Lock()
        self._proc = subprocess.Popen(
            argv,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            encoding="utf-8",
        )
        self._lines: queue.Queue[str | None] = queue.Queue()
        threading.Thread(target=self._pump_stdout, daemon=True).start()
        threading.Thread(target=self._pump_stderr, daemon=True).start()
        handshake = self._read_json()
        dim = handshake.get("dim") if isinstance(handshake, dict) else None
        if not isinstance(dim, int) or isinstance(dim, bool) or dim < 1:
            raise ProtocolError(f"bad handshake {handshake!r}, expected {{'dim': int}}")
        self.dim = dim

    def _pump_stdout(self) -> None:
        assert self._proc.stdout is not None
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _pump_stderr(self) -> None:
        assert self._proc.stderr is not None
        for line in self._proc.stderr:
            log.info("external encoder: %s", line.rstrip())

    def _read_json(self) -> object:
        try:
            line = self._lines.get(timeout=self.timeout)
        except queue.Empty:
            raise EncoderTimeout(f"no response within {self.timeout}s") from None
        if line is None:
            raise ProtocolError(f"encoder closed its stream (exit={self._proc.poll()})")
        try:
            return json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"response is not JSON: {line[:200]!r}") from exc

    def encode(self, texts: Sequence[str], side: str) -> EmbeddingMatrix:
        if side not in ("query", "passage"):
            raise ValueError(f"side must be 'query' or 'passage', got {side!r}")
        texts = list(texts)
        with self._lock:
            if self._proc.poll() is not None:
                raise ProtocolError(f"encoder process exited with {self._proc.returncode}")
            request = json.dumps({"texts": texts, "side": side}, ensure_ascii=False)
            try:
                assert self._proc.stdin is not None
                self._proc.stdin.write(request + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolError("encoder stdin closed") from exc
            response = self._read_json()
        if not isinstance(response, dict) or "embeddings" not in response:
            raise ProtocolError(f"response missing 'embeddings': {response!r}")
        rows = response["embeddings"]
        if not isinstance(rows, list) or len(rows) != len(texts):
            got = len(rows) if isinstance(rows, list) else "non-list"
            raise ProtocolError(f"encoder returned {got} rows for {len(texts)} texts")
        arr = np.zeros((len(rows), self.dim), dtype=np.float64)
        for i, row in enumerate(rows):
            if not isinstance(row, list) or len(row) != self.dim:
                raise ProtocolError(f"row {i} has length {len(row)}, expected dim {self.dim}")
            arr[i] = row
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            r, c = bad[0]
            raise NonFiniteEmbedding(f"non-finite value at row {r}, col {c}")
        if arr.shape[0]:
            norms = np.linalg.norm(arr, axis=1)
            if np.any(norms == 0.0):
                raise ProtocolError(f"zero embedding row {int(np.flatnonzero(norms == 0.0)[0])}")
            # Only rescale rows that actually need it, so an already-normalized
            # server is bit-identical to the in-process path.
            if np.abs(norms - 1.0).max() > 1e-9:
                arr = arr / norms[:, None]
        return EmbeddingMatrix(arr, normalized=True)

    def close(self) -> None:
        if self._proc.poll() is None:
            try:
                if self._proc.stdin:
                    self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()

    def __enter__(self) -> "ExternalEncoder":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def serve_model(model: EncoderModel, stdin: IO[str], stdout: IO[str]) -> None:
    """Serve an in-process model over the line protocol until EOF."""
    stdout.write(json.dumps({"dim": model.out_dim}) + "\n")
    stdout.flush()
    for line in stdin:
        if not line.strip():
            continue
        request = json.loads(line)
        matrix = encode(model, request["texts"], request["side"])
        stdout.write(json.dumps({"embeddings": matrix.data.tolist()}) + "\n")
        stdout.flush()
