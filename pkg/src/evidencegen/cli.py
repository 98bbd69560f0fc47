"""Command line entry point.

Exit codes: 0 success, 1 partial failure (or a rejected ``check``),
2 configuration / input / handshake error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .backends import BackendError
from .grammar import GrammarError, build_highlight_grammar, parse_gbnf, serialize_gbnf, tokenize_words
from .pipeline import (
    ConfigError,
    InputError,
    load_config_file,
    resolve_config,
    run_evaluate,
    run_extract,
    run_summarize,
)
from .prompting import PromptError
from .recognizer import RecognizerError, first_rejected_offset

logger = logging.getLogger("evidencegen")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


def _add_run_flags(p: argparse.ArgumentParser, generation: bool = True) -> None:
    p.add_argument("--config", help="TOML key/value file, or a previous run's manifest.json")
    p.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    p.add_argument("--jobs", type=int, help="parallel work items (default: cores for mock, 1 for remote)")
    if not generation:
        return
    p.add_argument("--backend", choices=["mock", "remote"])
    p.add_argument("--endpoint", help="remote model server URL (env: EVIDENCEGEN_ENDPOINT)")
    p.add_argument("--template", choices=["chatml", "openchat", "plain"])
    p.add_argument("--seed", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-p", type=float)
    p.add_argument("--repeat-penalty", type=float)
    p.add_argument("--mock-corpus", help="train the mock backend on this file instead of prompts+posts")
    p.add_argument("--prompts-dir", help="directory of prompt asset overrides (*.txt)")
    p.add_argument("--examples-file", help="JSONL of one-shot examples replacing the built-in ones")
    p.add_argument("--dump-prompt", action="store_true", help="write rendered prompts under OUT_DIR/prompts")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evidencegen",
        description="Grammar-constrained highlight extraction, primed summaries and evidence metrics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-grammar", help="compile a text file into a highlight GBNF grammar")
    p.add_argument("input")
    p.add_argument("-o", "--output", help="output .gbnf path (default: OUT_DIR/<input stem>.gbnf)")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--max-words", type=int, default=10000)

    p = sub.add_parser("extract", help="constrained highlight extraction for a posts JSONL file")
    p.add_argument("posts")
    _add_run_flags(p)

    p = sub.add_parser("summarize", help="primed per-user summaries for a posts JSONL file")
    p.add_argument("posts")
    _add_run_flags(p)

    p = sub.add_parser("evaluate", help="score generated highlights/summaries against gold")
    p.add_argument("gold")
    p.add_argument("generated", nargs="+")
    _add_run_flags(p, generation=False)
    p.add_argument("--similarity", choices=["token-f1", "exact", "remote"])
    p.add_argument("--nli", choices=["table", "remote"])
    p.add_argument("--nli-table", help="JSONL of {premise, hypothesis, p}")
    p.add_argument("--scorer-endpoint", help="URL serving /similarity and /contradiction")
    p.add_argument("--averaging", choices=["macro", "micro"])
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("check", help="test a candidate string against a GBNF grammar")
    p.add_argument("grammar")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("candidate", nargs="?")
    src.add_argument("--candidate-file")

    p = sub.add_parser("serve-mock", help="serve a mock backend over the remote wire protocol")
    p.add_argument("corpus")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--smoothing", type=float, default=0.01)
    return parser


def _config(args: argparse.Namespace):
    file_values = load_config_file(args.config) if args.config else None
    return resolve_config(file_values, vars(args))


def cmd_build_grammar(args) -> int:
    text = Path(args.input).read_bytes()
    src = tokenize_words(text)
    if len(src.words) > args.max_words:
        raise InputError(f"{args.input}: {len(src.words)} words exceeds --max-words {args.max_words}")
    grammar = build_highlight_grammar(src)
    out = Path(args.output) if args.output else Path(args.out_dir) / (Path(args.input).stem + ".gbnf")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(serialize_gbnf(grammar))
    print(f"wrote {out} ({len(grammar)} rules)")
    return EXIT_OK


def cmd_extract(args) -> int:
    cfg = _config(args)
    result = run_extract(args.posts, cfg, args.out_dir, dump_prompt=args.dump_prompt)
    n = len(result.records)
    print(f"extracted highlights for {n - result.failures}/{n} posts -> {Path(args.out_dir) / 'highlights.jsonl'}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_summarize(args) -> int:
    cfg = _config(args)
    result = run_summarize(args.posts, cfg, args.out_dir, dump_prompt=args.dump_prompt)
    n = len(result.records)
    print(f"summarized {n - result.failures}/{n} users -> {Path(args.out_dir) / 'summaries.jsonl'}")
    return EXIT_PARTIAL if result.failures else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    report = run_evaluate(args.gold, args.generated, cfg, args.out_dir, figures=not args.no_figures)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_check(args) -> int:
    grammar = parse_gbnf(Path(args.grammar).read_bytes())
    if args.candidate_file:
        candidate = Path(args.candidate_file).read_bytes()
    else:
        candidate = args.candidate.encode("utf-8")
    offset = first_rejected_offset(grammar, candidate)
    if offset is None:
        print("accept")
        return EXIT_OK
    print(f"reject at byte {offset}")
    return EXIT_PARTIAL


def cmd_serve_mock(args) -> int:
    from .backends import build_mock_from_corpus
    from .server import make_server, server_url

    backend = build_mock_from_corpus(Path(args.corpus).read_bytes(), args.order, args.smoothing,
                                     byte_fallback=True)
    server = make_server(args.host, args.port, backend=backend)
    print(f"serving {backend.descriptor.model_label} at {server_url(server)}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


COMMANDS = {
    "build-grammar": cmd_build_grammar,
    "extract": cmd_extract,
    "summarize": cmd_summarize,
    "evaluate": cmd_evaluate,
    "check": cmd_check,
    "serve-mock": cmd_serve_mock,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except BackendError as exc:
        print(f"error: backend unavailable or misbehaving: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, InputError, GrammarError, PromptError, RecognizerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
