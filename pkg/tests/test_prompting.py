import json

import pytest

from evidencegen.grammar import build_highlight_grammar, tokenize_words
from evidencegen.prompting import (
    TEMPLATES,
    PromptError,
    build_highlight_prompt,
    build_summary_prompt,
    join_posts,
    load_examples_file,
    load_prompt_assets,
    render,
)
from evidencegen.recognizer import accepts_string


@pytest.fixture
def tiny_assets(tmp_path):
    files = {
        "highlight_system": "SYS-H",
        "highlight_example_text": "ex text",
        "highlight_example_answer": '["ex"]',
        "summary_system": "SYS-S",
        "summary_example_text": "ex posts",
        "summary_example_answer": "ex summary",
    }
    for name, text in files.items():
        (tmp_path / f"{name}.txt").write_text(text + "\n")
    return load_prompt_assets(tmp_path)


def test_builtin_assets_load():
    a = load_prompt_assets()
    assert a.highlight_system.startswith("As a psychologist specializing in suicidal ideation")
    assert a.summary_priming == "This person is at {risk_level} risk."
    assert a.highlight_user_turn == "Risk level: {risk_level}\nText: {user_comment}"
    assert len(a.highlight_examples) == 1 and a.highlight_examples[0].risk_level == "high"
    assert not any(s.endswith("\n") for s in (a.highlight_system, a.summary_system))


def test_example_answer_items_come_from_example_text():
    a = load_prompt_assets()
    ex = a.highlight_examples[0]
    items = json.loads(ex.answer)
    assert len(items) == 3
    for item in items:
        assert item in ex.text
    # the shipped answer drops the period of the source's last word
    # ("actions."), so it lies outside the grammar built from that text
    grammar = build_highlight_grammar(tokenize_words(ex.text))
    assert not accepts_string(grammar, ex.answer)
    assert accepts_string(grammar, ex.answer.replace('actions"', 'actions."'))


def test_chatml_rendering_exact(tiny_assets):
    prompt = build_highlight_prompt("moderate", "my post", tiny_assets)
    assert render("chatml", prompt).decode() == (
        "<|im_start|>system\nSYS-H<|im_end|>\n"
        "<|im_start|>user\nRisk level: high\nText: ex text<|im_end|>\n"
        '<|im_start|>assistant\n["ex"]<|im_end|>\n'
        "<|im_start|>user\nRisk level: moderate\nText: my post<|im_end|>\n"
        "<|im_start|>assistant\n"
    )


def test_openchat_folds_system_into_first_user_turn(tiny_assets):
    prompt = build_highlight_prompt("low", "p", tiny_assets)
    assert render("openchat", prompt).decode() == (
        "GPT4 User: SYS-H\n\nRisk level: high\nText: ex text<|end_of_turn|>"
        'GPT4 Assistant: ["ex"]<|end_of_turn|>'
        "GPT4 User: Risk level: low\nText: p<|end_of_turn|>"
        "GPT4 Assistant: "
    )


def test_plain_template(tiny_assets):
    out = render(TEMPLATES["plain"], build_highlight_prompt("low", "p", tiny_assets)).decode()
    assert out.startswith("### System:\nSYS-H\n\n### User:\n")
    assert out.endswith("### User:\nRisk level: low\nText: p\n\n### Assistant:\n")


@pytest.mark.parametrize("risk", ["low", "moderate", "high"])
def test_summary_prompt_ends_with_priming(risk):
    prompt = build_summary_prompt(risk, ["first post", "second post"])
    for kind in TEMPLATES:
        assert render(kind, prompt).endswith(f"This person is at {risk} risk.".encode())
    assert prompt.target_text == "[post 1]\nfirst post\n\n[post 2]\nsecond post"


def test_join_single_post_is_bare():
    assert join_posts(["only"]) == "only"


def test_braces_in_posts_are_literal(tiny_assets):
    prompt = build_highlight_prompt("low", "a {risk_level} b {}", tiny_assets)
    assert prompt.target_user_text == "Risk level: low\nText: a {risk_level} b {}"


def test_errors(tiny_assets):
    with pytest.raises(PromptError, match="unknown risk level"):
        build_highlight_prompt("severe", "x", tiny_assets)
    with pytest.raises(PromptError):
        build_highlight_prompt("low", "   ", tiny_assets)
    with pytest.raises(PromptError):
        build_summary_prompt("low", ["", " "], tiny_assets)
    with pytest.raises(PromptError, match="unknown template"):
        render("alpaca", build_highlight_prompt("low", "x", tiny_assets))


def test_examples_file_replaces_examples(tmp_path, tiny_assets):
    path = tmp_path / "examples.jsonl"
    path.write_text(
        json.dumps({"task": "highlight", "risk_level": "low", "text": "t1", "answer": '["t1"]'}) + "\n"
        + json.dumps({"task": "highlight", "risk_level": "moderate", "text": "t2", "answer": '["t2"]'}) + "\n")
    assets = load_examples_file(path, tiny_assets)
    assert [e.text for e in assets.highlight_examples] == ["t1", "t2"]
    assert assets.summary_examples == tiny_assets.summary_examples
    rendered = render("chatml", build_highlight_prompt("high", "x", assets)).decode()
    assert rendered.count("<|im_start|>assistant\n") == 3
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"task": "other", "risk_level": "low", "text": "", "answer": ""}) + "\n")
    with pytest.raises(PromptError, match=":1:"):
        load_examples_file(bad, tiny_assets)
