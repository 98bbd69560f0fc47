import json
import socket

import pytest

from evidencegen.cli import main
from evidencegen.grammar import build_highlight_grammar, tokenize_words
from evidencegen.recognizer import accepts_string
from oracles import word_runs


@pytest.fixture
def posts3(fixtures, tmp_path):
    lines = (fixtures / "posts20.jsonl").read_text().splitlines()
    path = tmp_path / "posts3.jsonl"
    path.write_text("\n".join(lines[:3]) + "\n")
    return path


def _lines(path):
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]


def _manifest_without_timing(path):
    data = json.loads(path.read_text())
    data.pop("timing")
    return data


def test_build_grammar_golden(fixtures, tmp_path, capsys):
    out = tmp_path / "g.gbnf"
    assert main(["build-grammar", str(fixtures / "worked_example.txt"), "-o", str(out)]) == 0
    assert out.read_bytes() == (fixtures / "worked_example.gbnf").read_bytes()
    assert "(15 rules)" in capsys.readouterr().out


def test_build_grammar_rule_count(tmp_path, capsys):
    src = tmp_path / "words.txt"
    src.write_text(" ".join(f"w{i}" for i in range(1000)))
    assert main(["build-grammar", str(src), "--out-dir", str(tmp_path)]) == 0
    assert "(1003 rules)" in capsys.readouterr().out
    assert (tmp_path / "words.gbnf").exists()


def test_build_grammar_empty_source(tmp_path, capsys):
    src = tmp_path / "empty.txt"
    src.write_text("  \n")
    assert main(["build-grammar", str(src), "--out-dir", str(tmp_path)]) != 0
    assert "empty source" in capsys.readouterr().err


@pytest.mark.parametrize("candidate, code, message", [
    ('["Recently,"]', 0, "accept"),
    ('["suicide", "I attempted suicide", "medications.", "I attempted suicide"]', 0, "accept"),
    ('["prescription medication"]', 1, "reject at byte 25"),
    ("", 1, "reject at byte 0"),
])
def test_check(fixtures, capsys, candidate, code, message):
    assert main(["check", str(fixtures / "worked_example.gbnf"), candidate]) == code
    assert capsys.readouterr().out.strip() == message


def test_check_candidate_file(fixtures, tmp_path, capsys):
    cand = tmp_path / "c.txt"
    cand.write_bytes(b'["of prescription"]')
    assert main(["check", str(fixtures / "worked_example.gbnf"), "--candidate-file", str(cand)]) == 0


def test_check_bad_grammar(tmp_path, capsys):
    g = tmp_path / "bad.gbnf"
    g.write_text('root ::= [a-z]\n')
    assert main(["check", str(g), "x"]) == 2
    assert "character class" in capsys.readouterr().err


def test_extract_highlights_are_word_runs(posts3, tmp_path):
    out = tmp_path / "out"
    assert main(["extract", str(posts3), "--out-dir", str(out), "--seed", "42", "--max-tokens", "80"]) == 0
    posts = {p["post_id"]: p for p in _lines(posts3)}
    records = _lines(out / "highlights.jsonl")
    assert [r["post_id"] for r in records] == list(posts)
    for rec in records:
        body = posts[rec["post_id"]]["body"].encode()
        runs = word_runs(list(tokenize_words(body).words))
        assert all(h.encode() in runs for h in rec["highlights"])
        if not rec["truncated"] and b'"' not in body and b"\\" not in body:
            grammar = build_highlight_grammar(tokenize_words(body))
            assert accepts_string(grammar, json.dumps(rec["highlights"], ensure_ascii=False))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "extract"
    assert manifest["backend"]["kind"] == "mock-ngram"
    assert len(manifest["timing"]["items"]) == 3


def test_extract_is_deterministic_and_rerunnable_from_manifest(posts3, tmp_path):
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    args = ["extract", str(posts3), "--seed", "42", "--max-tokens", "60", "--jobs", "3"]
    assert main(args + ["--out-dir", str(a)]) == 0
    assert main(args + ["--out-dir", str(b), "--jobs", "1"]) == 0
    assert (a / "highlights.jsonl").read_bytes() == (b / "highlights.jsonl").read_bytes()
    ma, mb = _manifest_without_timing(a / "manifest.json"), _manifest_without_timing(b / "manifest.json")
    ma["config"].pop("jobs"), mb["config"].pop("jobs")
    assert ma == mb
    assert main(["extract", str(posts3), "--config", str(a / "manifest.json"), "--out-dir", str(c)]) == 0
    assert (a / "highlights.jsonl").read_bytes() == (c / "highlights.jsonl").read_bytes()


def test_summarize_priming_and_zero_tokens(fixtures, tmp_path):
    out = tmp_path / "s"
    posts = fixtures / "posts20.jsonl"
    assert main(["summarize", str(posts), "--out-dir", str(out), "--max-tokens", "0"]) == 0
    records = _lines(out / "summaries.jsonl")
    assert len(records) == 19  # u19 has two posts
    for rec in records:
        assert rec["summary"] == f"This person is at {rec['risk_level']} risk."


def test_summarize_is_deterministic(posts3, tmp_path):
    outs = [tmp_path / "x", tmp_path / "y"]
    for out in outs:
        assert main(["summarize", str(posts3), "--out-dir", str(out), "--seed", "7",
                     "--max-tokens", "25", "--template", "openchat"]) == 0
    assert (outs[0] / "summaries.jsonl").read_bytes() == (outs[1] / "summaries.jsonl").read_bytes()
    for rec in _lines(outs[0] / "summaries.jsonl"):
        assert rec["summary"].startswith(f"This person is at {rec['risk_level']} risk.")


def test_dump_prompt(posts3, tmp_path):
    out = tmp_path / "d"
    assert main(["extract", str(posts3), "--out-dir", str(out), "--max-tokens", "5", "--dump-prompt"]) == 0
    dumped = sorted(p.name for p in (out / "prompts").iterdir())
    assert dumped == ["highlight_p01.txt", "highlight_p02.txt", "highlight_p03.txt"]
    assert (out / "prompts" / "highlight_p01.txt").read_bytes().endswith(b"<|im_start|>assistant\n")


def test_unreachable_remote_exits_2(posts3, tmp_path, capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    code = main(["extract", str(posts3), "--backend", "remote", "--endpoint", f"http://127.0.0.1:{port}",
                 "--out-dir", str(tmp_path)])
    assert code == 2
    assert "backend unavailable" in capsys.readouterr().err
    assert not (tmp_path / "highlights.jsonl").exists()


def test_bad_flag_value_exits_2(posts3, tmp_path):
    assert main(["extract", str(posts3), "--top-p", "0", "--out-dir", str(tmp_path)]) == 2


def test_evaluate_self(fixtures, tmp_path, capsys):
    gold = fixtures / "eval5" / "gold.jsonl"
    assert main(["evaluate", str(gold), str(gold), "--out-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    for name in ("recall", "precision", "weighted_recall", "harmonic_mean"):
        assert report["overall"][name] == 1.0
    assert (tmp_path / "report.txt").read_text() == capsys.readouterr().out
    assert (tmp_path / "figures" / "highlights_by_risk.png").stat().st_size > 0
    assert (tmp_path / "figures" / "summaries_by_risk.png").stat().st_size > 0


def test_evaluate_fixture_names_missing_user(fixtures, tmp_path):
    d = fixtures / "eval5"
    assert main(["evaluate", str(d / "gold.jsonl"), str(d / "generated.jsonl"), str(d / "summaries.jsonl"),
                 "--nli-table", str(d / "nli_table.jsonl"), "--out-dir", str(tmp_path), "--no-figures"]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["per_user"]["u2"]["recall"] == 0.0
    assert any("u2" in w and "missing" in w for w in report["warnings"])
    assert report["per_risk_level"]["low"]["contradiction"] == pytest.approx(0.079)
    assert not (tmp_path / "figures").exists()


def test_evaluate_schema_error_has_line(fixtures, tmp_path, capsys):
    bad = tmp_path / "gen.jsonl"
    bad.write_text('{"user_id": "u1", "highlights": "not a list"}\n')
    assert main(["evaluate", str(fixtures / "eval5" / "gold.jsonl"), str(bad), "--out-dir", str(tmp_path)]) == 2
    assert "gen.jsonl:1" in capsys.readouterr().err
