"""Logit processing and the grammar-constrained decode loop.

Order per step: repeat penalty, grammar mask, temperature, softmax, top-p,
draw.  Masked entries are tracked with an explicit boolean array so that no
arithmetic ever touches ``-inf``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .grammar import Grammar
from .recognizer import (
    TokenMask,
    Vocabulary,
    advance_bytes,
    allowed_token_mask,
    init,
)

if TYPE_CHECKING:
    from .backends import LMBackend


RNG_ALGORITHM = "numpy.random.PCG64"
PIPELINE_ORDER = ("repeat_penalty", "grammar_mask", "temperature", "top_p", "draw")

# cumulative-sum slack so that e.g. 0.5+0.3+0.15 counts as reaching 0.95
_TOP_P_EPS = 1e-12


class SamplingError(RuntimeError):
    pass


class DeadEndError(SamplingError):
    """No token is allowed and the grammar does not accept end of output."""


class AllMaskedError(SamplingError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    temperature: float = 0.7
    top_p: float = 0.95
    repeat_penalty: float = 1.1
    penalty_window: int = 64
    penalize_prompt: bool = True
    seed: int = 0
    max_tokens: int = 256

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if not self.repeat_penalty >= 1:
            raise ValueError(f"repeat_penalty must be >= 1, got {self.repeat_penalty}")
        if self.penalty_window < 0:
            raise ValueError("penalty_window must be >= 0")
        if self.max_tokens < 0:
            raise ValueError("max_tokens must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")


@dataclass(frozen=True)
class LogitVector:
    """Scores aligned with a vocabulary; ``allowed[i]`` False means masked.

    Masked entries read as ``-inf`` in :attr:`scores`.
    """

    scores: np.ndarray
    allowed: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        allowed = (np.ones(scores.shape, dtype=bool) if self.allowed is None
                   else np.asarray(self.allowed, dtype=bool))
        if scores.ndim != 1 or allowed.shape != scores.shape:
            raise ValueError("scores and allowed must be 1-D arrays of equal length")
        scores = np.where(allowed, scores, -np.inf)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "allowed", allowed)

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def finite(self) -> np.ndarray:
        return self.allowed & np.isfinite(self.scores)


def apply_repeat_penalty(logits: LogitVector, context: Sequence[int], cfg: SamplerConfig) -> LogitVector:
    """Divide positive / multiply negative scores of tokens seen in the trailing window."""
    if cfg.repeat_penalty == 1.0 or cfg.penalty_window == 0 or not len(context):
        return logits
    recent = np.unique(np.asarray(context[-cfg.penalty_window:], dtype=np.int64))
    scores = logits.scores.copy()
    sel = scores[recent]
    scores[recent] = np.where(sel > 0, sel / cfg.repeat_penalty, sel * cfg.repeat_penalty)
    return LogitVector(scores, logits.allowed)


def apply_grammar_mask(logits: LogitVector, mask: TokenMask, eos_id: int | None = None) -> LogitVector:
    if not mask.any_allowed and not mask.end_acceptable:
        raise DeadEndError("grammar allows no token and end of output is not acceptable")
    allowed = logits.allowed & mask.allowed
    if eos_id is not None:
        allowed[eos_id] = logits.allowed[eos_id] and mask.end_acceptable
    return LogitVector(logits.scores, allowed)


def apply_temperature(logits: LogitVector, temperature: float) -> LogitVector:
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if temperature == 1.0:
        return logits
    scores = np.where(logits.allowed, logits.scores / temperature, -np.inf)
    return LogitVector(scores, logits.allowed)


def softmax(logits: LogitVector) -> np.ndarray:
    live = logits.finite
    if not live.any():
        raise AllMaskedError("every logit is masked")
    probs = np.zeros(len(logits))
    s = logits.scores[live]
    e = np.exp(s - s.max())
    probs[live] = e / e.sum()
    return probs


def top_p_filter(probs: np.ndarray, top_p: float) -> np.ndarray:
    """Keep the smallest descending-probability prefix with mass >= ``top_p``.

    The token that crosses the threshold is kept; equal probabilities keep
    the lower token id first.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if top_p >= 1.0:
        return probs.copy()
    order = np.argsort(-probs, kind="stable")
    cum = np.cumsum(probs[order])
    keep = int(np.searchsorted(cum, top_p - _TOP_P_EPS, side="left")) + 1
    keep = min(keep, len(probs))
    out = np.zeros_like(probs)
    kept = order[:keep]
    out[kept] = probs[kept] / probs[kept].sum()
    return out


def sample_token(logits: LogitVector, cfg: SamplerConfig, rng: np.random.Generator) -> int:
    """Softmax over live entries, nucleus filter, one inverse-CDF draw."""
    live = np.flatnonzero(logits.finite)
    if len(live) == 0:
        raise AllMaskedError("every logit is masked")
    if len(live) == 1:
        return int(live[0])
    probs = top_p_filter(softmax(logits), cfg.top_p)
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    idx = int(np.searchsorted(cdf, u, side="right"))
    if idx >= len(probs) or probs[idx] == 0.0:  # float round-off at the top of the CDF
        idx = int(np.flatnonzero(probs)[-1])
    return idx


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class DecodeResult:
    text: bytes
    token_ids: list[int]
    stop_reason: str  # "eos" or "length"


def decode_constrained(
    backend: "LMBackend",
    prompt_tokens: Sequence[int],
    grammar: Grammar | None,
    vocab: Vocabulary,
    cfg: SamplerConfig,
    rng: np.random.Generator | None = None,
) -> DecodeResult:
    """Sample until EOS or ``cfg.max_tokens``; ``grammar=None`` decodes unconstrained."""
    if rng is None:
        rng = make_rng(cfg.seed)
    state = init(grammar) if grammar is not None else None
    all_allowed = TokenMask(np.ones(len(vocab), dtype=bool), True)
    prompt = list(prompt_tokens)
    generated: list[int] = []
    out = bytearray()
    while len(generated) < cfg.max_tokens:
        logits = backend.next_logits(prompt + generated)
        if len(logits) != len(vocab):
            raise SamplingError(f"backend returned {len(logits)} logits for a vocabulary of {len(vocab)}")
        penalty_ctx = (prompt + generated) if cfg.penalize_prompt else generated
        logits = apply_repeat_penalty(logits, penalty_ctx, cfg)
        mask = allowed_token_mask(state, vocab) if state is not None else all_allowed
        logits = apply_grammar_mask(logits, mask, vocab.eos_id)
        logits = apply_temperature(logits, cfg.temperature)
        tok = sample_token(logits, cfg, rng)
        if tok == vocab.eos_id:
            return DecodeResult(bytes(out), generated, "eos")
        generated.append(tok)
        piece = vocab.tokens[tok]
        out += piece
        if state is not None:
            state = advance_bytes(state, piece)
    return DecodeResult(bytes(out), generated, "length")


def with_overrides(cfg: SamplerConfig, **kwargs) -> SamplerConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})
