"""Next-token logits providers: a deterministic n-gram mock and an HTTP client.

Wire protocol of the remote backend (JSON over HTTP; byte strings base64):

    GET  /handshake   -> {"vocab_size": int, "eos_id": int, "model": str, "logits": "full"}
    GET  /vocab       -> {"tokens": [b64, ...]}
    POST /logits      {"context": [int, ...]}  -> {"logits": [float, ...]}
    POST /tokenize    {"data": b64}            -> {"tokens": [int, ...]}
    POST /detokenize  {"tokens": [int, ...]}   -> {"data": b64}
"""

from __future__ import annotations

import base64
import logging
import math
import re
import threading
import time
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import requests

from .recognizer import Vocabulary
from .sampler import LogitVector

logger = logging.getLogger(__name__)

# log-probability used for zero-probability tokens; exp() underflows to exactly 0
LOG_ZERO = -1.0e4

_SEGMENT_RE = re.compile(rb" ?\S+|\s")


class BackendError(RuntimeError):
    pass


class BackendConnectionError(BackendError):
    pass


class BackendProtocolError(BackendError):
    pass


class TokenizationError(BackendError):
    pass


@dataclass(frozen=True)
class BackendDescriptor:
    kind: str  # "mock-ngram" or "remote"
    vocabulary: Vocabulary
    model_label: str

    def __post_init__(self):
        if len(self.vocabulary) == 0:
            raise ValueError("vocabulary is empty")

    def to_manifest(self) -> dict:
        return {"kind": self.kind, "model": self.model_label,
                "vocab_size": len(self.vocabulary), "eos_id": self.vocabulary.eos_id}


class LMBackend(Protocol):
    descriptor: BackendDescriptor

    @property
    def vocabulary(self) -> Vocabulary: ...

    def next_logits(self, context: Sequence[int]) -> LogitVector: ...

    def tokenize(self, text: bytes) -> list[int]: ...

    def detokenize(self, ids: Sequence[int]) -> bytes: ...


# ---------------------------------------------------------------------------
# Mock n-gram backend
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NgramTable:
    """Counts for every context length 0..order-1 (shorter ones serve sequence starts)."""

    order: int
    counts: dict[tuple[int, ...], dict[int, int]]
    smoothing: float
    vocab_size: int

    def distribution(self, context: tuple[int, ...]) -> np.ndarray:
        row = self.counts.get(context)
        probs = np.full(self.vocab_size, 1.0 / self.vocab_size)
        if not row:
            return probs  # unseen context: uniform
        total = sum(row.values())
        denom = total + self.smoothing * self.vocab_size
        probs[:] = self.smoothing / denom
        for tok, c in row.items():
            probs[tok] = (c + self.smoothing) / denom
        return probs


class MockNgramBackend:
    """Add-k smoothed n-gram model over whitespace tokens (space-prefixed when
    not line-initial).  With ``byte_fallback`` the vocabulary also holds all
    256 single-byte tokens so any text can be tokenized and spelled."""

    def __init__(self, table: NgramTable, vocabulary: Vocabulary, label: str = "mock-ngram",
                 byte_fallback: bool = False):
        self.table = table
        self.descriptor = BackendDescriptor("mock-ngram", vocabulary, label)
        self.byte_fallback = byte_fallback
        self._ids = {tok: i for i, tok in enumerate(vocabulary.tokens) if i != vocabulary.eos_id}
        self._cache: dict[tuple[int, ...], np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def vocabulary(self) -> Vocabulary:
        return self.descriptor.vocabulary

    def _context_key(self, context: Sequence[int]) -> tuple[int, ...]:
        n = self.table.order - 1
        return tuple(context[-n:]) if n > 0 else ()

    def next_logits(self, context: Sequence[int]) -> LogitVector:
        key = self._context_key(context)
        logits = self._cache.get(key)
        if logits is None:
            probs = self.table.distribution(key)
            with np.errstate(divide="ignore"):
                logits = np.where(probs > 0, np.log(probs), LOG_ZERO)
            with self._lock:
                self._cache[key] = logits
        return LogitVector(logits.copy())

    def tokenize(self, text: bytes) -> list[int]:
        out: list[int] = []
        for seg in _SEGMENT_RE.findall(text):
            tid = self._ids.get(seg)
            if tid is not None:
                out.append(tid)
            elif self.byte_fallback:
                out.extend(self._ids[bytes([b])] for b in seg)
            else:
                raise TokenizationError(f"segment {seg!r} is not in the vocabulary")
        return out

    def detokenize(self, ids: Sequence[int]) -> bytes:
        return b"".join(self.vocabulary.tokens[i] for i in ids)


def _line_tokens(line: bytes) -> list[bytes]:
    words = line.split()
    return words[:1] + [b" " + w for w in words[1:]]


def build_mock_from_corpus(corpus: bytes, order: int = 2, smoothing: float = 0.0,
                           byte_fallback: bool = False, label: str | None = None) -> MockNgramBackend:
    """Train the mock on ``corpus``; each non-blank line is one sequence ending in EOS.

    Vocabulary ids: corpus tokens in first-seen order, then (with
    ``byte_fallback``) missing single bytes in byte order, then EOS.
    """
    if isinstance(corpus, str):
        corpus = corpus.encode("utf-8")
    if order < 1:
        raise ValueError("order must be >= 1")
    if smoothing < 0:
        raise ValueError("smoothing must be >= 0")
    lines = [_line_tokens(line) for line in corpus.splitlines()]
    lines = [line for line in lines if line]
    if not lines:
        raise ValueError("empty corpus")

    tokens: dict[bytes, int] = {}
    for line in lines:
        for tok in line:
            tokens.setdefault(tok, len(tokens))
    if byte_fallback:
        for b in range(256):
            tokens.setdefault(bytes([b]), len(tokens))
    eos_id = len(tokens)
    vocab = Vocabulary(tuple(tokens) + (b"",), eos_id)

    counts: dict[tuple[int, ...], Counter] = defaultdict(Counter)
    for line in lines:
        seq = [tokens[t] for t in line] + [eos_id]
        for i, tok in enumerate(seq):
            for length in range(0, min(order - 1, i) + 1):
                counts[tuple(seq[i - length:i])][tok] += 1
    table = NgramTable(order, {ctx: dict(c) for ctx, c in counts.items()}, float(smoothing), len(vocab))
    if label is None:
        label = f"mock-ngram(order={order},k={smoothing:g},V={len(vocab)})"
    return MockNgramBackend(table, vocab, label, byte_fallback)


# ---------------------------------------------------------------------------
# Remote backend
# ---------------------------------------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


class JsonHttpClient:
    """Small JSON-over-HTTP helper with a connection pool and retry budget."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2, backoff: float = 0.2):
        self.endpoint = endpoint.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = requests.Session()

    def request(self, method: str, path: str, payload: dict | None = None) -> dict:
        url = f"{self.endpoint}{path}"
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            try:
                resp = self.session.request(method, url, json=payload, timeout=self.timeout)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = exc
            else:
                if resp.status_code >= 500:
                    last = BackendConnectionError(f"{url}: HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise BackendProtocolError(f"{url}: HTTP {resp.status_code}: {resp.text[:200]}")
                else:
                    try:
                        body = resp.json()
                    except ValueError as exc:
                        raise BackendProtocolError(f"{url}: response is not JSON") from exc
                    if not isinstance(body, dict):
                        raise BackendProtocolError(f"{url}: expected a JSON object")
                    return body
            if attempt < self.retries:
                time.sleep(self.backoff * (2 ** attempt))
        raise BackendConnectionError(f"{url}: {last}") from last


def _field(body: dict, name: str, kind: type, where: str):
    value = body.get(name)
    if not isinstance(value, kind) or isinstance(value, bool):
        raise BackendProtocolError(f"{where}: field {name!r} missing or not {kind.__name__}")
    return value


class RemoteBackend:
    """Client for a local model server speaking the full-logits protocol."""

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2):
        self.http = JsonHttpClient(endpoint, timeout, retries)
        hs = self.http.request("GET", "/handshake")
        vocab_size = _field(hs, "vocab_size", int, "/handshake")
        eos_id = _field(hs, "eos_id", int, "/handshake")
        model = _field(hs, "model", str, "/handshake")
        if hs.get("logits") != "full":
            raise BackendProtocolError(
                f"/handshake: server reports logits mode {hs.get('logits')!r}; "
                "grammar masking needs the full vector ('full')")
        raw = _field(self.http.request("GET", "/vocab"), "tokens", list, "/vocab")
        if len(raw) != vocab_size:
            raise BackendProtocolError(f"/vocab: expected {vocab_size} tokens, got {len(raw)}")
        try:
            vocab = Vocabulary(tuple(_unb64(t) for t in raw), eos_id)
        except (ValueError, TypeError) as exc:
            raise BackendProtocolError(f"/vocab: {exc}") from exc
        self.descriptor = BackendDescriptor("remote", vocab, model)

    @property
    def vocabulary(self) -> Vocabulary:
        return self.descriptor.vocabulary

    def next_logits(self, context: Sequence[int]) -> LogitVector:
        body = self.http.request("POST", "/logits", {"context": [int(t) for t in context]})
        values = _field(body, "logits", list, "/logits")
        expected = len(self.vocabulary)
        if len(values) != expected:
            raise BackendProtocolError(f"/logits: expected {expected} logits (vocab_size), got {len(values)}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v) for v in values):
            raise BackendProtocolError("/logits: every logit must be a finite number")
        return LogitVector(np.asarray(values, dtype=np.float64))

    def tokenize(self, text: bytes) -> list[int]:
        body = self.http.request("POST", "/tokenize", {"data": _b64(text)})
        ids = _field(body, "tokens", list, "/tokenize")
        if not all(isinstance(i, int) and 0 <= i < len(self.vocabulary) for i in ids):
            raise BackendProtocolError("/tokenize: token ids out of range")
        return ids

    def detokenize(self, ids: Sequence[int]) -> bytes:
        body = self.http.request("POST", "/detokenize", {"tokens": [int(i) for i in ids]})
        try:
            return _unb64(_field(body, "data", str, "/detokenize"))
        except ValueError as exc:
            raise BackendProtocolError(f"/detokenize: {exc}") from exc
