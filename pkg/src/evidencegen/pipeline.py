"""Batch orchestration behind the command line: extract, summarize, evaluate."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Sequence

from . import __version__
from .backends import BackendError, RemoteBackend, build_mock_from_corpus
from .grammar import GrammarError, build_highlight_grammar, tokenize_words
from .metrics import (
    SPLITTER_VERSION,
    TOKEN_COUNT_RULE,
    EvidenceRecord,
    ExactMatchScorer,
    MetricsReport,
    RemoteNliScorer,
    RemoteSimilarityScorer,
    TableNliScorer,
    TokenF1Scorer,
    aggregate_report,
)
from .prompting import (
    RISK_LEVELS,
    PromptAssets,
    PromptError,
    build_highlight_prompt,
    build_summary_prompt,
    load_examples_file,
    load_prompt_assets,
    render,
)
from .recognizer import RecognizerError
from .sampler import (
    PIPELINE_ORDER,
    RNG_ALGORITHM,
    SamplerConfig,
    SamplingError,
    decode_constrained,
    make_rng,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "EVIDENCEGEN_ENDPOINT"
SEED_DERIVATION = "first 8 bytes (big-endian) of sha256(f'{seed}:{item_id}')"


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass
class RunConfig:
    backend: str = "mock"
    endpoint: str = "http://127.0.0.1:8080"
    timeout: float = 60.0
    retries: int = 2
    template: str = "chatml"
    seed: int = 0
    max_tokens: int = 256
    temperature: float = 0.7
    top_p: float = 0.95
    repeat_penalty: float = 1.1
    penalty_window: int = 64
    penalize_prompt: bool = True
    mock_order: int = 3
    mock_smoothing: float = 0.01
    mock_corpus: str | None = None
    max_words: int = 10000
    jobs: int | None = None
    prompts_dir: str | None = None
    examples_file: str | None = None
    similarity: str = "token-f1"
    nli: str = "table"
    nli_table: str | None = None
    scorer_endpoint: str | None = None
    averaging: str = "macro"

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            temperature=self.temperature, top_p=self.top_p, repeat_penalty=self.repeat_penalty,
            penalty_window=self.penalty_window, penalize_prompt=self.penalize_prompt,
            seed=self.seed, max_tokens=self.max_tokens,
        )

    def validate(self) -> "RunConfig":
        if self.backend not in ("mock", "remote"):
            raise ConfigError(f"backend must be 'mock' or 'remote', got {self.backend!r}")
        if self.template not in ("chatml", "openchat", "plain"):
            raise ConfigError(f"unknown template {self.template!r}")
        if self.similarity not in ("token-f1", "exact", "remote"):
            raise ConfigError(f"unknown similarity scorer {self.similarity!r}")
        if self.nli not in ("table", "remote"):
            raise ConfigError(f"unknown NLI scorer {self.nli!r}")
        if self.averaging not in ("macro", "micro"):
            raise ConfigError("averaging must be 'macro' or 'micro'")
        if self.max_words < 1:
            raise ConfigError("max_words must be >= 1")
        try:
            self.sampler()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self


_CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Flat ``key = value`` TOML file, or the ``config`` section of a run manifest."""
    path = Path(path)
    try:
        if path.suffix == ".json":
            data = json.loads(path.read_text(encoding="utf-8"))
            data = data.get("config", data)
        else:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a table of key/value pairs")
    data = {k.replace("-", "_"): v for k, v in data.items()}
    unknown = sorted(set(data) - set(_CONFIG_FIELDS))
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return data


def resolve_config(file_values: dict[str, Any] | None, flag_values: dict[str, Any]) -> RunConfig:
    """Defaults < config file < environment (endpoint) < command-line flags."""
    values: dict[str, Any] = {}
    values.update(file_values or {})
    if os.environ.get(ENDPOINT_ENV):
        values["endpoint"] = os.environ[ENDPOINT_ENV]
    values.update({k: v for k, v in flag_values.items() if v is not None and k in _CONFIG_FIELDS})
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


def derive_seed(run_seed: int, item_id: str) -> int:
    digest = hashlib.sha256(f"{run_seed}:{item_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------

def read_jsonl(path: str | Path, required: Sequence[str] = ()) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InputError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in required if k not in rec]
            if missing:
                raise InputError(f"{path}:{lineno}: missing field(s) {missing}")
            rec["_line"] = lineno
            records.append(rec)
    return records


def write_jsonl(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


@dataclass
class PostRecord:
    user_id: str
    post_id: str
    risk_level: str
    body: str


def read_posts(path: str | Path) -> list[PostRecord]:
    posts = []
    for rec in read_jsonl(path, ("user_id", "post_id", "risk_level", "body")):
        where = f"{path}:{rec['_line']}"
        uid, pid = str(rec["user_id"]), str(rec["post_id"])
        if not uid or not pid:
            raise InputError(f"{where}: user_id and post_id must be nonempty")
        if rec["risk_level"] not in RISK_LEVELS:
            raise InputError(f"{where}: risk_level must be one of {list(RISK_LEVELS)}")
        if not isinstance(rec["body"], str):
            raise InputError(f"{where}: body must be a string")
        posts.append(PostRecord(uid, pid, rec["risk_level"], rec["body"]))
    return posts


# ---------------------------------------------------------------------------
# Highlight list parsing
# ---------------------------------------------------------------------------

def parse_highlight_list(text: bytes) -> list[str]:
    """Strict parser for ``["a", "b"]`` with ``\\"`` / ``\\\\`` escapes."""
    pos, items = 0, []

    def expect(tok: bytes) -> None:
        nonlocal pos
        if not text.startswith(tok, pos):
            raise ValueError(f"expected {tok!r} at byte {pos}")
        pos += len(tok)

    expect(b"[")
    while True:
        expect(b'"')
        buf = bytearray()
        while True:
            if pos >= len(text):
                raise ValueError("unterminated string")
            c = text[pos]
            if c == 0x5C and text[pos + 1:pos + 2] in (b'"', b"\\"):
                buf += text[pos + 1:pos + 2]
                pos += 2
            elif c == 0x22:
                pos += 1
                break
            else:
                buf.append(c)
                pos += 1
        items.append(buf.decode("utf-8", errors="replace"))
        if text.startswith(b"]", pos):
            pos += 1
            break
        expect(b", ")
    if pos != len(text):
        raise ValueError(f"trailing bytes after ']' at byte {pos}")
    return items


def parse_highlights_by_source(text: bytes, words: Sequence[bytes], complete: bool = True) -> list[str] | None:
    """Split a highlight-grammar output into items using the source words.

    Unlike :func:`parse_highlight_list` this copes with words that contain a
    raw ``"``.  With ``complete=False`` the text may be cut off anywhere and
    the items closed before the cut are returned.  ``None`` if no parse.
    """
    n = len(words)
    size = len(text)
    failed: set[int] = set()

    def cut(pos: int) -> bool:
        return not complete and pos >= size

    def items_from(pos: int) -> list[bytes] | None:
        # pos is just after '[' or ', '
        if cut(pos) or cut(pos + 1) and text.startswith(b'"', pos):
            return []
        if pos in failed or not text.startswith(b'"', pos):
            return None
        start = pos + 1
        for j in range(n):
            end, k = start, j
            while k < n:
                if not text.startswith(words[k], end):
                    if not complete and words[k].startswith(text[end:]):
                        return []  # cut inside this item
                    break
                end += len(words[k])
                if cut(end):
                    return []
                if text.startswith(b'"', end):
                    rest = after_item(end + 1)
                    if rest is not None:
                        return [text[start:end]] + rest
                if not text.startswith(b" ", end):
                    break
                end += 1
                k += 1
                if cut(end):
                    return []
                if k == n and text.startswith(b'"', end):
                    # the empty final rule lets the last word take one trailing space
                    rest = after_item(end + 1)
                    if rest is not None:
                        return [text[start:end - 1]] + rest
        failed.add(pos)
        return None

    def after_item(pos: int) -> list[bytes] | None:
        if text[pos:] == b"]" or cut(pos) or (not complete and text[pos:] == b","):
            return []
        if text.startswith(b", ", pos):
            return items_from(pos + 2)
        return None

    if not text.startswith(b"["):
        return [] if cut(0) else None
    found = items_from(1)
    if found is None:
        return None
    return [item.decode("utf-8", errors="replace") for item in found]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    command: str
    config: dict
    backend: dict
    prompts: dict
    inputs: dict
    outputs: list[str]
    settings: dict
    toolkit: dict = field(default_factory=lambda: {"name": "evidencegen", "version": __version__})
    timing: dict = field(default_factory=dict)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


def _file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sampler_settings(cfg: RunConfig) -> dict:
    return {
        "rng": RNG_ALGORITHM,
        "seed_derivation": SEED_DERIVATION,
        "pipeline_order": list(PIPELINE_ORDER),
        "repeat_penalty_rule": "divide positive / multiply negative scores",
        "repeat_penalty_scope": "prompt tail + generated" if cfg.penalize_prompt else "generated only",
        "top_p_boundary": "crossing token kept",
    }


# ---------------------------------------------------------------------------
# Backends and assets
# ---------------------------------------------------------------------------

def load_assets(cfg: RunConfig) -> PromptAssets:
    assets = load_prompt_assets(cfg.prompts_dir)
    if cfg.examples_file:
        assets = load_examples_file(cfg.examples_file, assets)
    return assets


def mock_corpus(cfg: RunConfig, assets: PromptAssets, bodies: Sequence[str]) -> bytes:
    if cfg.mock_corpus:
        return Path(cfg.mock_corpus).read_bytes()
    parts = [assets.highlight_system, assets.summary_system]
    for ex in assets.highlight_examples + assets.summary_examples:
        parts += [ex.text, ex.answer]
    parts += list(bodies)
    return "\n".join(parts).encode("utf-8")


def make_backend(cfg: RunConfig, assets: PromptAssets, bodies: Sequence[str]):
    """Mock trained on the prompt texts plus the input posts, or the remote client
    (which performs its handshake here, so an unreachable server fails fast)."""
    if cfg.backend == "remote":
        return RemoteBackend(cfg.endpoint, timeout=cfg.timeout, retries=cfg.retries)
    return build_mock_from_corpus(mock_corpus(cfg, assets, bodies), order=cfg.mock_order,
                                  smoothing=cfg.mock_smoothing, byte_fallback=True)


def _jobs(cfg: RunConfig) -> int:
    if cfg.jobs:
        return max(1, cfg.jobs)
    return (os.cpu_count() or 1) if cfg.backend == "mock" else 1


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    records: list[dict]
    manifest: RunManifest
    failures: int


def extract_post(post: PostRecord, backend, cfg: RunConfig, assets: PromptAssets,
                 dump_dir: Path | None = None) -> dict:
    out: dict[str, Any] = {"user_id": post.user_id, "post_id": post.post_id, "risk_level": post.risk_level}
    src = tokenize_words(post.body)
    if len(src.words) > cfg.max_words:
        raise InputError(f"post has {len(src.words)} words (max_words={cfg.max_words})")
    grammar = build_highlight_grammar(src)
    prompt = render(cfg.template, build_highlight_prompt(post.risk_level, post.body, assets))
    if dump_dir is not None:
        (dump_dir / f"highlight_{_safe(post.post_id)}.txt").write_bytes(prompt)
    sampler = cfg.sampler()
    rng = make_rng(derive_seed(cfg.seed, post.post_id))
    result = decode_constrained(backend, backend.tokenize(prompt), grammar, backend.vocabulary, sampler, rng)
    if result.stop_reason == "eos":
        highlights = parse_highlights_by_source(result.text, src.words)
        if highlights is None:
            raise RecognizerError("EOS-terminated output did not parse as a highlight list")
        out.update(highlights=highlights, truncated=False)
    else:
        out.update(highlights=parse_highlights_by_source(result.text, src.words, complete=False) or [],
                   truncated=True)
    out.update(stop_reason=result.stop_reason, tokens=len(result.token_ids))
    return out


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


_ITEM_ERRORS = (GrammarError, RecognizerError, SamplingError, BackendError, PromptError, InputError)


def _timed(fn, *args):
    t0 = time.perf_counter()
    try:
        rec = fn(*args)
    except _ITEM_ERRORS as exc:
        rec = {"error": f"{type(exc).__name__}: {exc}"}
    return rec, time.perf_counter() - t0


def run_extract(posts_path: str | Path, cfg: RunConfig, out_dir: str | Path, dump_prompt: bool = False,
                backend=None) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    posts = read_posts(posts_path)
    assets = load_assets(cfg)
    backend = backend or make_backend(cfg, assets, [p.body for p in posts])
    dump_dir = None
    if dump_prompt:
        dump_dir = out / "prompts"
        dump_dir.mkdir(exist_ok=True)

    def work(post: PostRecord):
        rec, secs = _timed(extract_post, post, backend, cfg, assets, dump_dir)
        if "error" in rec:
            logger.error("post %s: %s", post.post_id, rec["error"])
            rec = {"user_id": post.user_id, "post_id": post.post_id, "error": rec["error"]}
        return rec, secs

    with ThreadPoolExecutor(max_workers=_jobs(cfg)) as pool:
        results = list(pool.map(work, posts))
    records = [r for r, _ in results]
    write_jsonl(out / "highlights.jsonl", records)
    failures = sum("error" in r for r in records)
    manifest = RunManifest(
        command="extract",
        config=asdict(cfg),
        backend=backend.descriptor.to_manifest(),
        prompts={**assets.to_manifest(), "template": cfg.template},
        inputs={"posts": str(posts_path), "sha256": _file_digest(posts_path), "count": len(posts)},
        outputs=["highlights.jsonl"],
        settings={**sampler_settings(cfg), "word_split": "maximal non-whitespace byte runs",
                  "truncation": "complete items before the cut are kept, truncated=true"},
        timing={"started_at": started, "finished_at": _now(),
                "items": [{"post_id": p.post_id, "seconds": round(s, 6)} for p, (_, s) in zip(posts, results)]},
    )
    manifest.write(out / "manifest.json")
    return RunResult(records, manifest, failures)


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

def group_by_user(posts: Sequence[PostRecord]) -> list[tuple[str, list[PostRecord]]]:
    groups: dict[str, list[PostRecord]] = {}
    for p in posts:
        groups.setdefault(p.user_id, []).append(p)
    return list(groups.items())


def summarize_user(user_id: str, posts: list[PostRecord], backend, cfg: RunConfig, assets: PromptAssets,
                   dump_dir: Path | None = None) -> dict:
    levels = {p.risk_level for p in posts}
    if len(levels) != 1:
        raise InputError(f"user {user_id} has conflicting risk levels {sorted(levels)}")
    risk = levels.pop()
    prompt = build_summary_prompt(risk, [p.body for p in posts], assets)
    rendered = render(cfg.template, prompt)
    if dump_dir is not None:
        (dump_dir / f"summary_{_safe(user_id)}.txt").write_bytes(rendered)
    sampler = cfg.sampler()
    rng = make_rng(derive_seed(cfg.seed, user_id))
    result = decode_constrained(backend, backend.tokenize(rendered), None, backend.vocabulary, sampler, rng)
    summary = prompt.priming_prefix + result.text.decode("utf-8", errors="replace")
    return {"user_id": user_id, "risk_level": risk, "summary": summary,
            "stop_reason": result.stop_reason, "tokens": len(result.token_ids)}


def run_summarize(posts_path: str | Path, cfg: RunConfig, out_dir: str | Path, dump_prompt: bool = False,
                  backend=None) -> RunResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    posts = read_posts(posts_path)
    users = group_by_user(posts)
    assets = load_assets(cfg)
    backend = backend or make_backend(cfg, assets, [p.body for p in posts])
    dump_dir = None
    if dump_prompt:
        dump_dir = out / "prompts"
        dump_dir.mkdir(exist_ok=True)

    def work(item):
        uid, user_posts = item
        rec, secs = _timed(summarize_user, uid, user_posts, backend, cfg, assets, dump_dir)
        if "error" in rec:
            logger.error("user %s: %s", uid, rec["error"])
            rec = {"user_id": uid, "error": rec["error"]}
        return rec, secs

    with ThreadPoolExecutor(max_workers=_jobs(cfg)) as pool:
        results = list(pool.map(work, users))
    records = [r for r, _ in results]
    write_jsonl(out / "summaries.jsonl", records)
    manifest = RunManifest(
        command="summarize",
        config=asdict(cfg),
        backend=backend.descriptor.to_manifest(),
        prompts={**assets.to_manifest(), "template": cfg.template,
                 "priming_trailing_whitespace": "none", "post_join": "[post k] headers, blank-line separated"},
        inputs={"posts": str(posts_path), "sha256": _file_digest(posts_path), "users": len(users)},
        outputs=["summaries.jsonl"],
        settings=sampler_settings(cfg),
        timing={"started_at": started, "finished_at": _now(),
                "items": [{"user_id": u, "seconds": round(s, 6)} for (u, _), (_, s) in zip(users, results)]},
    )
    manifest.write(out / "manifest.json")
    return RunResult(records, manifest, sum("error" in r for r in records))


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def read_nli_table(path: str | Path) -> TableNliScorer:
    table = {}
    for rec in read_jsonl(path, ("premise", "hypothesis", "p")):
        table[(rec["premise"], rec["hypothesis"])] = float(rec["p"])
    return TableNliScorer(table)


def make_scorers(cfg: RunConfig):
    if cfg.similarity == "remote" or cfg.nli == "remote":
        if not cfg.scorer_endpoint:
            raise ConfigError("remote scorers need scorer_endpoint")
    if cfg.similarity == "remote":
        sim = RemoteSimilarityScorer(cfg.scorer_endpoint, cfg.timeout, cfg.retries)
    else:
        sim = ExactMatchScorer() if cfg.similarity == "exact" else TokenF1Scorer()
    if cfg.nli == "remote":
        nli = RemoteNliScorer(cfg.scorer_endpoint, cfg.timeout, cfg.retries)
    else:
        nli = read_nli_table(cfg.nli_table) if cfg.nli_table else TableNliScorer({})
    return sim, nli


def build_evidence_records(gold_path: str | Path, generated_paths: Sequence[str | Path]):
    """Join gold and generated JSONL by user id.

    Generated lines may carry ``highlights`` (per post; merged per user)
    and/or ``summary``.  Lines with ``error`` contribute nothing.
    """
    gold = read_jsonl(gold_path, ("user_id", "risk_level"))
    warnings: list[str] = []
    gen_h: dict[str, list[str]] = {}
    gen_s: dict[str, str] = {}
    seen: set[str] = set()
    for path in generated_paths:
        for rec in read_jsonl(path, ("user_id",)):
            uid = str(rec["user_id"])
            seen.add(uid)
            where = f"{path}:{rec['_line']}"
            if "error" in rec:
                warnings.append(f"{where}: generation error for user {uid}: {rec['error']}")
                continue
            if "highlights" in rec:
                hl = rec["highlights"]
                if not isinstance(hl, list) or not all(isinstance(h, str) for h in hl):
                    raise InputError(f"{where}: highlights must be a list of strings")
                gen_h.setdefault(uid, []).extend(hl)
            if "summary" in rec:
                if not isinstance(rec["summary"], str):
                    raise InputError(f"{where}: summary must be a string")
                gen_s[uid] = rec["summary"]
    records = []
    gold_ids = set()
    for g in gold:
        where = f"{gold_path}:{g['_line']}"
        uid = str(g["user_id"])
        if uid in gold_ids:
            raise InputError(f"{where}: duplicate user_id {uid}")
        gold_ids.add(uid)
        if g["risk_level"] not in RISK_LEVELS:
            raise InputError(f"{where}: risk_level must be one of {list(RISK_LEVELS)}")
        hl = g.get("highlights", [])
        if not isinstance(hl, list) or not all(isinstance(h, str) for h in hl):
            raise InputError(f"{where}: highlights must be a list of strings")
        records.append(EvidenceRecord(uid, g["risk_level"], list(hl), gen_h.get(uid, []),
                                      g.get("summary"), gen_s.get(uid, "")))
    missing = [r.user_id for r in records if r.user_id not in seen]
    extra = sorted(seen - gold_ids)
    warnings += [f"user {uid}: present in generated output but not in gold" for uid in extra]
    return records, missing, warnings


def run_evaluate(gold_path: str | Path, generated_paths: Sequence[str | Path], cfg: RunConfig,
                 out_dir: str | Path, figures: bool = True) -> MetricsReport:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, missing, warnings = build_evidence_records(gold_path, generated_paths)
    sim, nli = make_scorers(cfg)
    report = aggregate_report(records, sim, nli, averaging=cfg.averaging, missing_generated=missing)
    report.warnings += warnings
    report.settings.update(token_count_rule=TOKEN_COUNT_RULE, sentence_splitter=SPLITTER_VERSION)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    if figures:
        from .plotting import write_report_figures
        write_report_figures(report, out / "figures")
    return report
