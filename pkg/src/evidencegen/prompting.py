"""One-shot prompts for highlight extraction and primed summarization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

__all__ = [
    "RISK_LEVELS",
    "ASSET_VERSION",
    "Example",
    "PromptAssets",
    "TaskPrompt",
    "ChatTemplate",
    "TEMPLATES",
    "load_prompt_assets",
    "load_examples_file",
    "build_highlight_prompt",
    "build_summary_prompt",
    "join_posts",
    "render",
]

RISK_LEVELS = ("low", "moderate", "high")
ASSET_VERSION = "1"

_ASSET_NAMES = (
    "highlight_system", "highlight_example_text", "highlight_example_answer", "highlight_user_turn",
    "summary_system", "summary_example_text", "summary_example_answer", "summary_user_turn",
    "summary_priming",
)


class PromptError(ValueError):
    pass


def _check_risk(risk_level: str) -> str:
    if risk_level not in RISK_LEVELS:
        raise PromptError(f"unknown risk level {risk_level!r}; expected one of {{{', '.join(RISK_LEVELS)}}}")
    return risk_level


def _fill(template: str, **values: str) -> str:
    # plain replacement: post bodies routinely contain braces
    for key, value in values.items():
        template = template.replace("{" + key + "}", value)
    return template


@dataclass(frozen=True)
class Example:
    risk_level: str
    text: str
    answer: str


@dataclass(frozen=True)
class PromptAssets:
    highlight_system: str
    highlight_user_turn: str
    highlight_examples: tuple[Example, ...]
    summary_system: str
    summary_user_turn: str
    summary_examples: tuple[Example, ...]
    summary_priming: str
    version: str = ASSET_VERSION
    source: str = "builtin"

    def to_manifest(self) -> dict:
        return {"version": self.version, "source": self.source,
                "highlight_examples": len(self.highlight_examples),
                "summary_examples": len(self.summary_examples)}


def _read_asset(name: str, directory: Path | None) -> str:
    if directory is not None and (directory / f"{name}.txt").exists():
        text = (directory / f"{name}.txt").read_text(encoding="utf-8")
    else:
        text = resources.files("evidencegen.assets").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    return text[:-1] if text.endswith("\n") else text


def load_prompt_assets(directory: str | Path | None = None) -> PromptAssets:
    """Packaged assets, with any same-named ``*.txt`` in ``directory`` taking precedence."""
    d = Path(directory) if directory is not None else None
    a = {name: _read_asset(name, d) for name in _ASSET_NAMES}
    return PromptAssets(
        highlight_system=a["highlight_system"],
        highlight_user_turn=a["highlight_user_turn"],
        highlight_examples=(Example("high", a["highlight_example_text"], a["highlight_example_answer"]),),
        summary_system=a["summary_system"],
        summary_user_turn=a["summary_user_turn"],
        summary_examples=(Example("high", a["summary_example_text"], a["summary_example_answer"]),),
        summary_priming=a["summary_priming"],
        source="builtin" if d is None else str(d),
    )


def load_examples_file(path: str | Path, assets: PromptAssets) -> PromptAssets:
    """Replace the one-shot examples with those listed in a JSONL file.

    Each line: ``{"task": "highlight"|"summary", "risk_level": ..., "text": ..., "answer": ...}``.
    Tasks with no lines keep their current examples.
    """
    found: dict[str, list[Example]] = {"highlight": [], "summary": []}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            task = rec.get("task")
            if task not in found:
                raise PromptError(f"{path}:{lineno}: task must be 'highlight' or 'summary'")
            found[task].append(Example(_check_risk(rec["risk_level"]), rec["text"], rec["answer"]))
    return replace(
        assets,
        highlight_examples=tuple(found["highlight"]) or assets.highlight_examples,
        summary_examples=tuple(found["summary"]) or assets.summary_examples,
        source=f"{assets.source}+{path}",
    )


@dataclass(frozen=True)
class TaskPrompt:
    """System text, one-shot example turns, and the open target turn."""

    system_text: str
    examples: tuple[tuple[str, str], ...]  # (user turn, assistant turn)
    target_risk_level: str
    target_text: str
    target_user_text: str
    priming_prefix: str = ""

    def __post_init__(self):
        _check_risk(self.target_risk_level)
        if not self.target_text.strip():
            raise PromptError("target text is empty")

    @property
    def example_user_text(self) -> str:
        return self.examples[0][0] if self.examples else ""

    @property
    def example_assistant_text(self) -> str:
        return self.examples[0][1] if self.examples else ""


def build_highlight_prompt(risk_level: str, comment: str, assets: PromptAssets | None = None) -> TaskPrompt:
    assets = assets or load_prompt_assets()
    _check_risk(risk_level)
    if not comment.strip():
        raise PromptError("comment is empty")
    examples = tuple(
        (_fill(assets.highlight_user_turn, risk_level=ex.risk_level, user_comment=ex.text), ex.answer)
        for ex in assets.highlight_examples)
    return TaskPrompt(
        system_text=assets.highlight_system,
        examples=examples,
        target_risk_level=risk_level,
        target_text=comment,
        target_user_text=_fill(assets.highlight_user_turn, risk_level=risk_level, user_comment=comment),
    )


def join_posts(posts: Sequence[str]) -> str:
    """A single post is used as-is; several get ``[post k]`` headers and blank-line separators."""
    if len(posts) == 1:
        return posts[0]
    return "\n\n".join(f"[post {k}]\n{body}" for k, body in enumerate(posts, 1))


def build_summary_prompt(risk_level: str, comments: Sequence[str], assets: PromptAssets | None = None) -> TaskPrompt:
    assets = assets or load_prompt_assets()
    _check_risk(risk_level)
    comments = [c for c in comments if c.strip()]
    if not comments:
        raise PromptError("no comments to summarize")
    text = join_posts(comments)
    examples = tuple(
        (_fill(assets.summary_user_turn, risk_level=ex.risk_level, user_comments=ex.text), ex.answer)
        for ex in assets.summary_examples)
    return TaskPrompt(
        system_text=assets.summary_system,
        examples=examples,
        target_risk_level=risk_level,
        target_text=text,
        target_user_text=_fill(assets.summary_user_turn, risk_level=risk_level, user_comments=text),
        priming_prefix=_fill(assets.summary_priming, risk_level=risk_level),
    )


@dataclass(frozen=True)
class ChatTemplate:
    kind: str
    begin: dict[str, str] = field(hash=False)
    end: dict[str, str] = field(hash=False)
    system_supported: bool = True

    def turns(self, prompt: TaskPrompt) -> list[tuple[str, str]]:
        """Closed turns in order; without a system role the system text is
        folded into the first user turn."""
        turns: list[tuple[str, str]] = []
        for user, assistant in prompt.examples:
            turns += [("user", user), ("assistant", assistant)]
        turns.append(("user", prompt.target_user_text))
        if self.system_supported:
            turns.insert(0, ("system", prompt.system_text))
        else:
            turns[0] = ("user", f"{prompt.system_text}\n\n{turns[0][1]}")
        return turns


TEMPLATES: dict[str, ChatTemplate] = {
    "chatml": ChatTemplate(
        "chatml",
        begin={r: f"<|im_start|>{r}\n" for r in ("system", "user", "assistant")},
        end={r: "<|im_end|>\n" for r in ("system", "user", "assistant")},
    ),
    "openchat": ChatTemplate(
        "openchat",
        begin={"user": "GPT4 User: ", "assistant": "GPT4 Assistant: "},
        end={"user": "<|end_of_turn|>", "assistant": "<|end_of_turn|>"},
        system_supported=False,
    ),
    "plain": ChatTemplate(
        "plain",
        begin={"system": "### System:\n", "user": "### User:\n", "assistant": "### Assistant:\n"},
        end={r: "\n\n" for r in ("system", "user", "assistant")},
    ),
}


def render(template: ChatTemplate | str, prompt: TaskPrompt) -> bytes:
    """Prompt bytes ending with an open assistant turn (plus any priming prefix)."""
    if isinstance(template, str):
        try:
            template = TEMPLATES[template]
        except KeyError:
            raise PromptError(f"unknown template {template!r}; expected one of {sorted(TEMPLATES)}") from None
    parts = [template.begin[role] + text + template.end[role] for role, text in template.turns(prompt)]
    parts.append(template.begin["assistant"] + prompt.priming_prefix)
    return "".join(parts).encode("utf-8")
