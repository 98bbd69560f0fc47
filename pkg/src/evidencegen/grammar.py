"""GBNF subset: AST, parser, serializer and the highlight-grammar builder.

Only the constructs needed for verbatim-highlight grammars are supported:
``name ::= ...`` rules, double-quoted literals (``\\"`` and ``\\\\`` escapes),
``|`` alternation, ``( )`` grouping, and the ``?`` / ``*`` markers.  Literals
are bytes; escaping only exists in the serialized text.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator, Union

__all__ = [
    "Literal",
    "RuleRef",
    "Group",
    "Repeat",
    "Rule",
    "Grammar",
    "SourceTokenization",
    "GrammarError",
    "GrammarSyntaxError",
    "UnsupportedConstructError",
    "UndefinedRuleError",
    "DuplicateRuleError",
    "EmptySourceError",
    "parse_gbnf",
    "serialize_gbnf",
    "tokenize_words",
    "build_highlight_grammar",
]


class GrammarError(ValueError):
    pass


class GrammarSyntaxError(GrammarError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at byte {position}")
        self.position = position


class UnsupportedConstructError(GrammarSyntaxError):
    pass


class UndefinedRuleError(GrammarError):
    def __init__(self, name: str, referenced_from: str):
        super().__init__(f"undefined rule {name!r} referenced from {referenced_from!r}")
        self.name = name


class DuplicateRuleError(GrammarError):
    def __init__(self, name: str):
        super().__init__(f"duplicate rule name {name!r}")
        self.name = name


class EmptySourceError(GrammarError):
    def __init__(self):
        super().__init__("empty source")


class Repeat(enum.Enum):
    ONCE = ""
    OPTIONAL = "?"
    STAR = "*"


@dataclass(frozen=True)
class Literal:
    value: bytes


@dataclass(frozen=True)
class RuleRef:
    name: str


@dataclass(frozen=True)
class Group:
    alternates: tuple[tuple["Element", ...], ...]
    repeat: Repeat = Repeat.ONCE


Element = Union[Literal, RuleRef, Group]
Alternate = tuple[Element, ...]


@dataclass(frozen=True)
class Rule:
    name: str
    alternates: tuple[Alternate, ...]


@dataclass(frozen=True)
class Grammar:
    """An ordered set of rules plus the name of the start rule.

    Rule order is definition order and is preserved by serialization.
    """

    rules: tuple[Rule, ...]
    root: str = "root"
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        index: dict[str, Rule] = {}
        for rule in self.rules:
            if rule.name in index:
                raise DuplicateRuleError(rule.name)
            index[rule.name] = rule
        if self.root not in index:
            raise UndefinedRuleError(self.root, "<grammar root>")
        for rule in self.rules:
            for ref in _iter_refs(rule.alternates):
                if ref not in index:
                    raise UndefinedRuleError(ref, rule.name)
        object.__setattr__(self, "_index", index)

    def __getitem__(self, name: str) -> Rule:
        return self._index[name]

    def __contains__(self, name: object) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self.rules)

    @cached_property
    def _hash(self) -> int:
        return hash((self.rules, self.root))

    def __hash__(self) -> int:
        return self._hash


def _iter_refs(alternates: tuple[Alternate, ...]) -> Iterator[str]:
    for alt in alternates:
        for elem in alt:
            if isinstance(elem, RuleRef):
                yield elem.name
            elif isinstance(elem, Group):
                yield from _iter_refs(elem.alternates)


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_NAME_BYTES = frozenset(b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_-")
_INLINE_WS = b" \t"


class _Parser:
    def __init__(self, text: bytes):
        self.text = text
        self.pos = 0

    def error(self, message: str) -> GrammarSyntaxError:
        return GrammarSyntaxError(message, self.pos)

    def peek(self) -> int | None:
        return self.text[self.pos] if self.pos < len(self.text) else None

    def skip_ws(self, newlines: bool) -> None:
        ws = b" \t\r\n" if newlines else _INLINE_WS
        while self.pos < len(self.text):
            c = self.text[self.pos]
            if c == ord("#"):  # comment to end of line
                while self.pos < len(self.text) and self.text[self.pos] not in b"\r\n":
                    self.pos += 1
            elif c in ws:
                self.pos += 1
            else:
                break

    def name(self) -> str:
        start = self.pos
        while self.pos < len(self.text) and self.text[self.pos] in _NAME_BYTES:
            self.pos += 1
        if self.pos == start:
            raise self.error("expected rule name")
        return self.text[start:self.pos].decode("ascii")

    def literal(self) -> Literal:
        assert self.text[self.pos] == ord('"')
        self.pos += 1
        out = bytearray()
        while True:
            c = self.peek()
            if c is None:
                raise self.error("unterminated literal, expected '\"'")
            if c == ord('"'):
                self.pos += 1
                return Literal(bytes(out))
            if c == ord("\\"):
                nxt = self.text[self.pos + 1:self.pos + 2]
                if nxt not in (b'"', b"\\"):
                    raise UnsupportedConstructError(
                        f"unsupported escape sequence \\{nxt.decode('latin-1')}", self.pos)
                out += nxt
                self.pos += 2
            else:
                out.append(c)
                self.pos += 1

    def alternates(self, in_group: bool) -> tuple[Alternate, ...]:
        alts = [self.sequence(in_group)]
        while self.peek() == ord("|"):
            self.pos += 1
            self.skip_ws(newlines=in_group)
            alts.append(self.sequence(in_group))
        return tuple(alts)

    def sequence(self, in_group: bool) -> Alternate:
        elems: list[Element] = []
        while True:
            self.skip_ws(newlines=in_group)
            c = self.peek()
            if c is None or c in b"\r\n|)":
                break
            if c == ord('"'):
                elem: Element = self.literal()
            elif c == ord("("):
                self.pos += 1
                self.skip_ws(newlines=True)
                alts = self.alternates(in_group=True)
                self.skip_ws(newlines=True)
                if self.peek() != ord(")"):
                    raise self.error("expected ')'")
                self.pos += 1
                elem = Group(alts)
            elif c in _NAME_BYTES:
                start = self.pos
                name = self.name()
                save = self.pos
                self.skip_ws(newlines=False)
                if self.text.startswith(b"::=", self.pos):
                    raise UnsupportedConstructError("nested rule definition", start)
                self.pos = save
                elem = RuleRef(name)
            elif c == ord("["):
                raise UnsupportedConstructError("unsupported construct: character class", self.pos)
            else:
                raise self.error(f"unexpected character {chr(c)!r}, expected literal, '(' or rule name")
            c = self.peek()
            if c == ord("?") or c == ord("*"):
                self.pos += 1
                if not isinstance(elem, Group):
                    elem = Group(((elem,),))
                elem = Group(elem.alternates, Repeat(chr(c)))
            elif c == ord("+"):
                raise UnsupportedConstructError("unsupported construct: '+' repetition", self.pos)
            elif c == ord("{"):
                raise UnsupportedConstructError("unsupported construct: '{m,n}' repetition", self.pos)
            elems.append(elem)
        if not elems:
            raise self.error("expected literal, '(' or rule name")
        return tuple(elems)

    def rule(self) -> Rule:
        name = self.name()
        self.skip_ws(newlines=False)
        if not self.text.startswith(b"::=", self.pos):
            raise self.error("expected '::='")
        self.pos += 3
        self.skip_ws(newlines=False)
        alts = self.alternates(in_group=False)
        self.skip_ws(newlines=False)
        c = self.peek()
        if c is not None and c not in b"\r\n":
            raise self.error(f"unexpected character {chr(c)!r}, expected end of line")
        return Rule(name, alts)

    def grammar(self, root: str) -> Grammar:
        rules: list[Rule] = []
        seen: set[str] = set()
        self.skip_ws(newlines=True)
        while self.pos < len(self.text):
            start = self.pos
            rule = self.rule()
            if rule.name in seen:
                err = DuplicateRuleError(rule.name)
                err.position = start
                raise err
            seen.add(rule.name)
            rules.append(rule)
            self.skip_ws(newlines=True)
        if not rules:
            raise self.error("expected at least one rule")
        return Grammar(tuple(rules), root)


def parse_gbnf(text: bytes | str, root: str = "root") -> Grammar:
    """Parse GBNF-subset text into a :class:`Grammar`.

    Raises :class:`GrammarSyntaxError` (with byte position),
    :class:`UnsupportedConstructError`, :class:`UndefinedRuleError` or
    :class:`DuplicateRuleError`.
    """
    if isinstance(text, str):
        text = text.encode("utf-8")
    return _Parser(text).grammar(root)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def _quote(value: bytes) -> bytes:
    return b'"' + value.replace(b"\\", b"\\\\").replace(b'"', b'\\"') + b'"'


def _serialize_alternates(alts: tuple[Alternate, ...]) -> bytes:
    return b" | ".join(b" ".join(_serialize_element(e) for e in alt) for alt in alts)


def _serialize_element(elem: Element) -> bytes:
    if isinstance(elem, Literal):
        return _quote(elem.value)
    if isinstance(elem, RuleRef):
        return elem.name.encode("ascii")
    return b"(" + _serialize_alternates(elem.alternates) + b")" + elem.repeat.value.encode()


def serialize_gbnf(grammar: Grammar) -> bytes:
    lines = [rule.name.encode("ascii") + b" ::= " + _serialize_alternates(rule.alternates)
             for rule in grammar.rules]
    return b"\n".join(lines) + b"\n"


# ---------------------------------------------------------------------------
# Highlight grammar
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceTokenization:
    words: tuple[bytes, ...]
    original_text: bytes


def tokenize_words(text: bytes | str) -> SourceTokenization:
    """Split on whitespace runs; punctuation stays attached to its word."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    words = tuple(text.split())
    if not words:
        raise EmptySourceError()
    return SourceTokenization(words, text)


def build_highlight_grammar(src: SourceTokenization) -> Grammar:
    """Grammar for a bracketed list of quoted, contiguous word runs of ``src``.

    ``ti`` matches word ``i`` optionally followed by a space and ``t(i+1)``;
    the last word chains into an empty rule so every position has the same shape.
    """
    n = len(src.words)
    if n == 0:
        raise EmptySourceError()
    names = [f"t{i}" for i in range(n + 1)]
    rules = [
        Rule("root", ((
            Literal(b"["),
            RuleRef("h"),
            Group(((Literal(b", "), RuleRef("h")),), Repeat.STAR),
            Literal(b"]"),
        ),)),
        Rule("h", ((
            Literal(b'"'),
            Group(tuple((RuleRef(name),) for name in names[:n])),
            Literal(b'"'),
        ),)),
    ]
    for i, word in enumerate(src.words):
        rules.append(Rule(names[i], ((
            Literal(word),
            Group(((Literal(b" "), RuleRef(names[i + 1])),), Repeat.OPTIONAL),
        ),)))
    rules.append(Rule(names[n], ((Literal(b""),),)))
    return Grammar(tuple(rules), "root")
