"""Highlight and summary evaluation.

Highlights are scored with a similarity scorer (recall, precision, length
weighted recall, harmonic mean); summaries with an NLI contradiction scorer
(consistency and contradiction).  Per-user values are macro-averaged overall
and within each risk level.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Protocol, Sequence

from .prompting import RISK_LEVELS

logger = logging.getLogger(__name__)

HIGHLIGHT_METRICS = ("recall", "precision", "weighted_recall", "harmonic_mean")
SUMMARY_METRICS = ("consistency", "contradiction")
METRIC_NAMES = HIGHLIGHT_METRICS + SUMMARY_METRICS

SPLITTER_VERSION = "regex-1"
TOKEN_COUNT_RULE = "whitespace tokens of the concatenated highlights"


class MetricsError(ValueError):
    pass


class SimilarityScorer(Protocol):
    def score(self, a: str, b: str) -> float: ...


class NliScorer(Protocol):
    def contradiction_prob(self, premise: str, hypothesis: str) -> float: ...


class ExactMatchScorer:
    """1.0 for identical strings (ignoring surrounding whitespace), else 0.0."""

    name = "exact"

    def score(self, a: str, b: str) -> float:
        return 1.0 if a.strip() == b.strip() else 0.0


class TokenF1Scorer:
    """Bag-of-words F1 over lowercased whitespace tokens."""

    name = "token-f1"

    def score(self, a: str, b: str) -> float:
        ta, tb = a.lower().split(), b.lower().split()
        if not ta or not tb:
            return 0.0
        common = sum((Counter(ta) & Counter(tb)).values())
        if common == 0:
            return 0.0
        p, r = common / len(tb), common / len(ta)
        return 2 * p * r / (p + r)


class TableNliScorer:
    """Contradiction probabilities looked up from a ``(premise, hypothesis)`` table."""

    name = "table"

    def __init__(self, table: Mapping[tuple[str, str], float], default: float = 0.0):
        for p in list(table.values()) + [default]:
            if not 0.0 <= p <= 1.0:
                raise MetricsError(f"contradiction probability {p} outside [0, 1]")
        self.table = dict(table)
        self.default = default

    def contradiction_prob(self, premise: str, hypothesis: str) -> float:
        return self.table.get((premise, hypothesis), self.default)


class RemoteSimilarityScorer:
    """``POST /similarity {"pairs": [[a, b], ...]} -> {"scores": [...]}``."""

    name = "remote-similarity"

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2):
        from .backends import JsonHttpClient
        self.http = JsonHttpClient(endpoint, timeout, retries)

    def score_many(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        from .backends import BackendProtocolError
        body = self.http.request("POST", "/similarity", {"pairs": [list(p) for p in pairs]})
        scores = body.get("scores")
        if not isinstance(scores, list) or len(scores) != len(pairs):
            raise BackendProtocolError(f"/similarity: expected {len(pairs)} scores")
        return [_unit(s, "/similarity") for s in scores]

    def score(self, a: str, b: str) -> float:
        return self.score_many([(a, b)])[0]


class RemoteNliScorer:
    """``POST /contradiction {"pairs": [[premise, hypothesis], ...]} -> {"probs": [...]}``."""

    name = "remote-nli"

    def __init__(self, endpoint: str, timeout: float = 30.0, retries: int = 2):
        from .backends import JsonHttpClient
        self.http = JsonHttpClient(endpoint, timeout, retries)

    def contradiction_prob(self, premise: str, hypothesis: str) -> float:
        from .backends import BackendProtocolError
        body = self.http.request("POST", "/contradiction", {"pairs": [[premise, hypothesis]]})
        probs = body.get("probs")
        if not isinstance(probs, list) or len(probs) != 1:
            raise BackendProtocolError("/contradiction: expected 1 probability")
        return _unit(probs[0], "/contradiction")


def _unit(value, where: str) -> float:
    from .backends import BackendProtocolError
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise BackendProtocolError(f"{where}: value {value!r} is not a number in [0, 1]")
    return float(value)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class EvidenceRecord:
    user_id: str
    risk_level: str
    gold_highlights: list[str] = field(default_factory=list)
    generated_highlights: list[str] = field(default_factory=list)
    gold_summary: str | None = None
    generated_summary: str | None = None

    def __post_init__(self):
        if self.risk_level not in RISK_LEVELS:
            raise MetricsError(f"user {self.user_id}: unknown risk level {self.risk_level!r}")


# ---------------------------------------------------------------------------
# Highlight metrics
# ---------------------------------------------------------------------------

def _best_matches(sources: Sequence[str], targets: Sequence[str], scorer: SimilarityScorer) -> list[float]:
    if not targets:
        return [0.0] * len(sources)
    return [max(scorer.score(s, t) for t in targets) for s in sources]


def highlight_recall(rec: EvidenceRecord, scorer: SimilarityScorer) -> float:
    """Mean over gold highlights of the best similarity to any generated one."""
    if not rec.gold_highlights:
        raise MetricsError(f"user {rec.user_id}: no gold highlights")
    best = _best_matches(rec.gold_highlights, rec.generated_highlights, scorer)
    return sum(best) / len(best)


def highlight_precision(rec: EvidenceRecord, scorer: SimilarityScorer) -> float:
    if not rec.generated_highlights:
        return 0.0
    best = _best_matches(rec.generated_highlights, rec.gold_highlights, scorer)
    return sum(best) / len(best)


def token_length(highlights: Iterable[str]) -> int:
    return sum(len(h.split()) for h in highlights)


def weighted_recall(recall: float, gold_len: int, candidate_len: int) -> float:
    """Scale recall by ``gold_len / candidate_len`` when the candidate is longer."""
    if candidate_len > gold_len:
        return recall * gold_len / candidate_len
    return recall


def harmonic_mean(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Summary metrics
# ---------------------------------------------------------------------------

_ABBREVIATIONS = frozenset({
    "mr", "mrs", "ms", "dr", "prof", "sr", "jr", "st", "vs", "etc", "e.g", "i.e", "approx", "no",
})
_BOUNDARY = re.compile(r"[.!?]+[\"')\]]*\s+")


def split_sentences(text: str) -> list[str]:
    """Split after ``.``/``!``/``?`` followed by whitespace, unless the word
    before the period is a known abbreviation or a single letter."""
    sentences: list[str] = []
    start = 0
    for m in _BOUNDARY.finditer(text):
        chunk = text[start:m.start()]
        last = chunk.rsplit(None, 1)[-1].lower() if chunk.split() else ""
        if text[m.start()] == "." and (last.rstrip(".") in _ABBREVIATIONS or (len(last) == 1 and last.isalpha() and last != "i")):
            continue
        sentence = text[start:m.end()].strip()
        if sentence:
            sentences.append(sentence)
        start = m.end()
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _contradiction_probs(rec: EvidenceRecord, nli: NliScorer) -> list[float]:
    sentences = split_sentences(rec.generated_summary or "")
    probs = [nli.contradiction_prob(rec.gold_summary or "", s) for s in sentences]
    for p in probs:
        if not 0.0 <= p <= 1.0:
            raise MetricsError(f"NLI scorer returned {p} outside [0, 1]")
    return probs


def summary_consistency(rec: EvidenceRecord, nli: NliScorer) -> float:
    """Mean of ``1 - p`` over generated sentences; 0 for an empty summary."""
    probs = _contradiction_probs(rec, nli)
    if not probs:
        logger.warning("user %s: empty generated summary scores consistency 0", rec.user_id)
        return 0.0
    return sum(1.0 - p for p in probs) / len(probs)


def summary_contradiction(rec: EvidenceRecord, nli: NliScorer) -> float:
    """Max ``p`` over generated sentences; 1 (worst) for an empty summary."""
    probs = _contradiction_probs(rec, nli)
    if not probs:
        logger.warning("user %s: empty generated summary scores contradiction 1", rec.user_id)
        return 1.0
    return max(probs)


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

@dataclass
class UserMetrics:
    user_id: str
    risk_level: str
    recall: float | None = None
    precision: float | None = None
    weighted_recall: float | None = None
    harmonic_mean: float | None = None
    consistency: float | None = None
    contradiction: float | None = None
    L_gold: int | None = None
    L_candidate: int | None = None


@dataclass
class MetricsReport:
    per_user: dict[str, UserMetrics]
    overall: dict[str, float | None]
    per_risk: dict[str, dict[str, float | None] | None]
    counts: dict[str, int]
    warnings: list[str] = field(default_factory=list)
    averaging: str = "macro"
    settings: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "averaging": self.averaging,
            "overall": self.overall,
            "per_risk_level": self.per_risk,
            "counts": self.counts,
            "per_user": {uid: asdict(m) for uid, m in self.per_user.items()},
            "warnings": self.warnings,
            "settings": self.settings,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        return format_report_table(self)


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


def _per_user(rec: EvidenceRecord, scorer, nli, warnings: list[str]) -> UserMetrics:
    m = UserMetrics(rec.user_id, rec.risk_level)
    if rec.gold_highlights:
        m.recall = highlight_recall(rec, scorer)
        m.precision = highlight_precision(rec, scorer)
        m.L_gold = token_length(rec.gold_highlights)
        m.L_candidate = token_length(rec.generated_highlights)
        m.weighted_recall = weighted_recall(m.recall, m.L_gold, m.L_candidate)
        m.harmonic_mean = harmonic_mean(m.precision, m.recall)
    elif rec.generated_highlights:
        warnings.append(f"user {rec.user_id}: no gold highlights; highlight metrics skipped")
    if rec.gold_summary is not None and rec.gold_summary.strip():
        if not (rec.generated_summary or "").strip():
            warnings.append(f"user {rec.user_id}: empty generated summary (consistency 0, contradiction 1)")
        m.consistency = summary_consistency(rec, nli)
        m.contradiction = summary_contradiction(rec, nli)
    return m


def _micro(records: list[EvidenceRecord], scorer, which: str) -> float | None:
    vals: list[float] = []
    for rec in records:
        if not rec.gold_highlights:
            continue
        if which == "recall":
            vals += _best_matches(rec.gold_highlights, rec.generated_highlights, scorer)
        else:
            vals += _best_matches(rec.generated_highlights, rec.gold_highlights, scorer)
    return _mean(vals)


def _aggregate(users: list[UserMetrics]) -> dict[str, float | None]:
    return {name: _mean([getattr(u, name) for u in users if getattr(u, name) is not None])
            for name in METRIC_NAMES}


def aggregate_report(records: Sequence[EvidenceRecord], scorer: SimilarityScorer | None = None,
                     nli: NliScorer | None = None, averaging: str = "macro",
                     missing_generated: Iterable[str] = ()) -> MetricsReport:
    """Per-user metrics plus macro (or micro, for recall/precision) averages.

    Risk levels without users are reported as ``None`` rather than 0.
    """
    if not records:
        raise MetricsError("no records to evaluate")
    if averaging not in ("macro", "micro"):
        raise MetricsError(f"averaging must be 'macro' or 'micro', got {averaging!r}")
    scorer = scorer or TokenF1Scorer()
    nli = nli or TableNliScorer({})
    warnings = [f"user {uid}: missing from generated output (scored as empty)" for uid in missing_generated]
    per_user: dict[str, UserMetrics] = {}
    for rec in records:
        per_user[rec.user_id] = _per_user(rec, scorer, nli, warnings)
    users = list(per_user.values())
    overall = _aggregate(users)
    per_risk: dict[str, dict[str, float | None] | None] = {}
    for level in RISK_LEVELS:
        bucket = [u for u in users if u.risk_level == level]
        per_risk[level] = _aggregate(bucket) if bucket else None
    if averaging == "micro":
        for which in ("recall", "precision"):
            overall[which] = _micro(list(records), scorer, which)
            for level in RISK_LEVELS:
                if per_risk[level] is not None:
                    per_risk[level][which] = _micro([r for r in records if r.risk_level == level], scorer, which)
    counts = {"users": len(users), **{level: sum(u.risk_level == level for u in users) for level in RISK_LEVELS}}
    settings = {
        "similarity_scorer": getattr(scorer, "name", type(scorer).__name__),
        "nli_scorer": getattr(nli, "name", type(nli).__name__),
        "token_count_rule": TOKEN_COUNT_RULE,
        "sentence_splitter": SPLITTER_VERSION,
        "premise": "whole gold summary",
    }
    return MetricsReport(per_user, overall, per_risk, counts, warnings, averaging, settings)


def _fmt(value: float | None) -> str:
    return "  -  " if value is None else f"{value:.3f}"


def format_report_table(report: MetricsReport) -> str:
    """Plain-text tables: overall metrics, then each metric split by risk level."""
    lines = ["Overall (" + report.averaging + f" average over {report.counts['users']} users)", ""]
    header = f"{'Recall':>8} {'Precision':>10} {'W.Recall':>9} {'H.Mean':>8} | {'Consist.':>9} {'Contrad.':>9}"
    lines += [header, "-" * len(header)]
    o = report.overall
    lines.append(f"{_fmt(o['recall']):>8} {_fmt(o['precision']):>10} {_fmt(o['weighted_recall']):>9} "
                 f"{_fmt(o['harmonic_mean']):>8} | {_fmt(o['consistency']):>9} {_fmt(o['contradiction']):>9}")
    for title, names in (("Highlights by risk level", HIGHLIGHT_METRICS),
                         ("Summaries by risk level", SUMMARY_METRICS)):
        lines += ["", title, ""]
        head = f"{'Metric':<16}" + "".join(f"{lvl[:4].title() + ('.' if lvl == 'moderate' else ''):>8}"
                                          for lvl in RISK_LEVELS)
        lines += [head, "-" * len(head)]
        for name in names:
            row = f"{name:<16}"
            for lvl in RISK_LEVELS:
                bucket = report.per_risk[lvl]
                row += f"{_fmt(None if bucket is None else bucket[name]):>8}"
            lines.append(row)
    lines += ["", "Users per risk level: " + ", ".join(f"{lvl}={report.counts[lvl]}" for lvl in RISK_LEVELS)]
    if report.warnings:
        lines += ["", "Warnings:"] + [f"  - {w}" for w in report.warnings]
    return "\n".join(lines) + "\n"
