"""Incremental byte-level recognition of GBNF-subset grammars.

The grammar is lowered to a flat program of byte and rule-reference slots
(groups become synthetic rules, ``x*`` becomes right recursion).  A parse
stack is a tuple of program positions with the next expected slot on top;
a recognizer state is the canonically ordered set of live stacks.  The empty
stack means a complete parse.

Transitions are memoized per compiled grammar, so repeated states (every
highlight restarts from the same set after ``"``) are stepped with a single
dict lookup.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .grammar import Grammar, Group, Literal, Repeat, RuleRef

__all__ = [
    "RecognizerError",
    "Recognizer",
    "RecognizerState",
    "Vocabulary",
    "TokenMask",
    "compile_grammar",
    "init",
    "advance_bytes",
    "accepts_end",
    "allowed_token_mask",
    "allowed_token_mask_reference",
    "accepts_string",
    "first_rejected_offset",
    "DEFAULT_MAX_STACKS",
]

DEFAULT_MAX_STACKS = 4096

_END = 0
_BYTE = 1
_REF = 2

Stack = tuple[int, ...]


class RecognizerError(RuntimeError):
    pass


class Recognizer:
    """Compiled form of a :class:`Grammar` plus its transition caches."""

    def __init__(self, grammar: Grammar, max_stacks: int = DEFAULT_MAX_STACKS):
        self.grammar = grammar
        self.max_stacks = max_stacks
        self._kind: list[int] = []
        self._value: list[int] = []
        self._alt_starts: list[list[int]] = []
        self._rule_ids: dict[str, int] = {}
        self._lower(grammar)
        self._check_left_recursion()

        self._lock = threading.Lock()
        self._state_ids: dict[tuple[Stack, ...], int] = {}
        self._states: list[tuple[Stack, ...]] = []
        self._accepting: list[bool] = []
        self._transitions: list[dict[int, int]] = []
        self._expand_cache: dict[Stack, tuple[Stack, ...]] = {}
        self.rejected_id = self._intern(())
        self.initial_id = self._intern(self._closure([(self._alt_start_stack(self._rule_ids[grammar.root]))]))

    # -- lowering ---------------------------------------------------------

    def _lower(self, grammar: Grammar) -> None:
        pending: list[tuple[int, tuple]] = []
        for rule in grammar.rules:
            self._rule_ids[rule.name] = len(self._alt_starts)
            self._alt_starts.append([])
            pending.append((self._rule_ids[rule.name], rule.alternates))
        i = 0
        while i < len(pending):
            rule_id, alternates = pending[i]
            i += 1
            for alt in alternates:
                self._alt_starts[rule_id].append(len(self._kind))
                for elem in alt:
                    if isinstance(elem, Literal):
                        for b in elem.value:
                            self._emit(_BYTE, b)
                    elif isinstance(elem, RuleRef):
                        self._emit(_REF, self._rule_ids[elem.name])
                    elif isinstance(elem, _SelfRef):
                        self._emit(_REF, elem.rule_id)
                    else:
                        sub = self._synthetic_rule(elem, pending)
                        self._emit(_REF, sub)
                self._emit(_END, 0)

    def _synthetic_rule(self, group: Group, pending: list) -> int:
        rule_id = len(self._alt_starts)
        self._alt_starts.append([])
        if group.repeat is Repeat.ONCE:
            alts = group.alternates
        elif group.repeat is Repeat.OPTIONAL:
            alts = group.alternates + ((),)
        else:
            # x* ::= x x* | ""   -- the self reference is appended below
            alts = tuple(alt + (_SelfRef(rule_id),) for alt in group.alternates) + ((),)
        pending.append((rule_id, alts))
        return rule_id

    def _emit(self, kind: int, value: int) -> None:
        self._kind.append(kind)
        self._value.append(value)

    def _check_left_recursion(self) -> None:
        n = len(self._alt_starts)
        nullable = [False] * n
        changed = True
        while changed:
            changed = False
            for r in range(n):
                if nullable[r]:
                    continue
                for start in self._alt_starts[r]:
                    pos = start
                    while self._kind[pos] == _REF and nullable[self._value[pos]]:
                        pos += 1
                    if self._kind[pos] == _END:
                        nullable[r] = changed = True
                        break
        left: list[set[int]] = [set() for _ in range(n)]
        for r in range(n):
            for start in self._alt_starts[r]:
                pos = start
                while self._kind[pos] == _REF:
                    left[r].add(self._value[pos])
                    if not nullable[self._value[pos]]:
                        break
                    pos += 1
        names = {v: k for k, v in self._rule_ids.items()}
        state = [0] * n  # 0 unvisited, 1 on stack, 2 done
        for root in range(n):
            if state[root]:
                continue
            work = [(root, iter(left[root]))]
            state[root] = 1
            while work:
                node, it = work[-1]
                nxt = next(it, None)
                if nxt is None:
                    state[node] = 2
                    work.pop()
                elif state[nxt] == 1:
                    culprit = next((names[r] for r, _ in reversed(work) if r in names), "<group>")
                    raise RecognizerError(f"left recursion through rule {culprit!r} is not supported")
                elif state[nxt] == 0:
                    state[nxt] = 1
                    work.append((nxt, iter(left[nxt])))

    # -- stack machinery --------------------------------------------------

    def _alt_start_stack(self, rule_id: int) -> Stack:
        # placeholder stack whose top is a reference to ``rule_id``; expanded by _closure
        return (-1 - rule_id,)

    def _expand(self, stack: Stack) -> tuple[Stack, ...]:
        """All stacks reachable without consuming input whose top is a byte (or empty)."""
        cached = self._expand_cache.get(stack)
        if cached is not None:
            return cached
        out: list[Stack] = []
        seen: set[Stack] = set()
        work = [stack]
        while work:
            s = work.pop()
            if s in seen:
                continue
            seen.add(s)
            if not s:
                out.append(s)
                continue
            top = s[-1]
            if top < 0:
                rule_id, rest = -1 - top, s[:-1]
            elif self._kind[top] == _BYTE:
                out.append(s)
                continue
            else:
                rule_id = self._value[top]
                rest = s[:-1]
                if self._kind[top + 1] != _END:
                    rest = rest + (top + 1,)
            for start in self._alt_starts[rule_id]:
                work.append(rest if self._kind[start] == _END else rest + (start,))
            if len(seen) > self.max_stacks:
                raise RecognizerError(f"stack set exceeded {self.max_stacks} stacks")
        result = tuple(out)
        self._expand_cache[stack] = result
        return result

    def _closure(self, stacks) -> tuple[Stack, ...]:
        out: set[Stack] = set()
        for s in stacks:
            out.update(self._expand(s))
        if len(out) > self.max_stacks:
            raise RecognizerError(f"stack set exceeded {self.max_stacks} stacks")
        return tuple(sorted(out))

    def _intern(self, stacks: tuple[Stack, ...]) -> int:
        sid = self._state_ids.get(stacks)
        if sid is None:
            sid = len(self._states)
            self._state_ids[stacks] = sid
            self._states.append(stacks)
            self._accepting.append(() in stacks)
            self._transitions.append({})
        return sid

    def step(self, state_id: int, byte: int) -> int:
        """Next state id after consuming ``byte``; ``rejected_id`` if impossible."""
        nxt = self._transitions[state_id].get(byte)
        if nxt is not None:
            return nxt
        if state_id == self.rejected_id:
            return state_id
        kind, value = self._kind, self._value
        moved = []
        for s in self._states[state_id]:
            if s and value[s[-1]] == byte:  # every non-empty top is a byte slot
                top = s[-1]
                moved.append(s[:-1] if kind[top + 1] == _END else s[:-1] + (top + 1,))
        with self._lock:
            nxt = self._intern(self._closure(moved)) if moved else self.rejected_id
            self._transitions[state_id][byte] = nxt
        return nxt

    def step_bytes(self, state_id: int, data: bytes) -> int:
        for b in data:
            state_id = self.step(state_id, b)
            if state_id == self.rejected_id:
                break
        return state_id

    def stacks(self, state_id: int) -> tuple[Stack, ...]:
        return self._states[state_id]

    def is_accepting(self, state_id: int) -> bool:
        return self._accepting[state_id]

    def allowed_first_bytes(self, state_id: int) -> set[int]:
        return {self._value[s[-1]] for s in self._states[state_id] if s}


@lru_cache(maxsize=64)
def _compiled(grammar: Grammar, max_stacks: int) -> Recognizer:
    return Recognizer(grammar, max_stacks)


def compile_grammar(grammar: Grammar, max_stacks: int = DEFAULT_MAX_STACKS) -> Recognizer:
    return _compiled(grammar, max_stacks)


class _SelfRef:
    """Reference to a synthetic rule by id (only used while lowering ``*``)."""

    __slots__ = ("rule_id",)

    def __init__(self, rule_id: int):
        self.rule_id = rule_id


@dataclass(frozen=True, eq=False)
class RecognizerState:
    """Set of live parse stacks after ``consumed`` bytes.

    Equality compares the stack set and byte count, so two routes to the same
    input give equal states.
    """

    recognizer: Recognizer = field(repr=False)
    state_id: int
    consumed: int = 0

    @property
    def stacks(self) -> tuple[Stack, ...]:
        return self.recognizer.stacks(self.state_id)

    @property
    def rejected(self) -> bool:
        return self.state_id == self.recognizer.rejected_id

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, RecognizerState):
            return NotImplemented
        return (self.consumed == other.consumed and self.stacks == other.stacks
                and self.recognizer.grammar == other.recognizer.grammar)

    def __hash__(self) -> int:
        return hash((self.stacks, self.consumed))


@dataclass(frozen=True)
class Vocabulary:
    """Token byte strings indexed by id; ``eos_id`` carries the empty string."""

    tokens: tuple[bytes, ...]
    eos_id: int

    def __post_init__(self):
        if not 0 <= self.eos_id < len(self.tokens):
            raise ValueError(f"eos_id {self.eos_id} out of range for {len(self.tokens)} tokens")
        if self.tokens[self.eos_id] != b"":
            raise ValueError("EOS token must have the empty byte string")
        for i, tok in enumerate(self.tokens):
            if i != self.eos_id and not tok:
                raise ValueError(f"token {i} is empty; only EOS may be empty")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def trie(self) -> "_TrieNode":
        trie = self.__dict__.get("_trie")
        if trie is None:
            trie = _TrieNode.build(self.tokens, self.eos_id)
            object.__setattr__(self, "_trie", trie)
        return trie


class _TrieNode:
    __slots__ = ("children", "ids")

    def __init__(self):
        self.children: dict[int, _TrieNode] = {}
        self.ids: list[int] = []

    @classmethod
    def build(cls, tokens: Sequence[bytes], eos_id: int) -> "_TrieNode":
        root = cls()
        for tid, tok in enumerate(tokens):
            if tid == eos_id:
                continue
            node = root
            for b in tok:
                child = node.children.get(b)
                if child is None:
                    child = node.children[b] = cls()
                node = child
            node.ids.append(tid)
        return root


@dataclass(frozen=True)
class TokenMask:
    allowed: np.ndarray
    end_acceptable: bool

    @property
    def any_allowed(self) -> bool:
        return bool(self.allowed.any())


def init(grammar: Grammar, max_stacks: int = DEFAULT_MAX_STACKS) -> RecognizerState:
    rec = compile_grammar(grammar, max_stacks)
    return RecognizerState(rec, rec.initial_id, 0)


def advance_bytes(state: RecognizerState, data: bytes) -> RecognizerState:
    """Consume ``data``; the result is rejected if any byte cannot be consumed."""
    if state.rejected:
        raise RecognizerError("cannot advance a rejected state")
    if not data:
        return state
    rec = state.recognizer
    sid = rec.step_bytes(state.state_id, data)
    return RecognizerState(rec, sid, state.consumed + len(data))


def accepts_end(state: RecognizerState) -> bool:
    if state.rejected:
        raise RecognizerError("accepts_end on a rejected state")
    return state.recognizer.is_accepting(state.state_id)


def allowed_token_mask(state: RecognizerState, vocab: Vocabulary) -> TokenMask:
    """Tokens whose complete byte string is consumable from ``state``."""
    if state.rejected:
        raise RecognizerError("allowed_token_mask on a rejected state")
    rec = state.recognizer
    step, rejected = rec.step, rec.rejected_id
    allowed = np.zeros(len(vocab), dtype=bool)
    work = [(vocab.trie, state.state_id)]
    while work:
        node, sid = work.pop()
        for b, child in node.children.items():
            nxt = step(sid, b)
            if nxt == rejected:
                continue
            if child.ids:
                allowed[child.ids] = True
            if child.children:
                work.append((child, nxt))
    end = rec.is_accepting(state.state_id)
    allowed[vocab.eos_id] = end
    return TokenMask(allowed, end)


def allowed_token_mask_reference(state: RecognizerState, vocab: Vocabulary) -> TokenMask:
    """Per-token fallback of :func:`allowed_token_mask` (no trie)."""
    allowed = np.zeros(len(vocab), dtype=bool)
    for tid, tok in enumerate(vocab.tokens):
        if tid != vocab.eos_id:
            allowed[tid] = not advance_bytes(state, tok).rejected
    end = accepts_end(state)
    allowed[vocab.eos_id] = end
    return TokenMask(allowed, end)


def accepts_string(grammar: Grammar, data: bytes | str) -> bool:
    if isinstance(data, str):
        data = data.encode("utf-8")
    state = advance_bytes(init(grammar), data)
    return not state.rejected and accepts_end(state)


def first_rejected_offset(grammar: Grammar, data: bytes) -> int | None:
    """Byte offset of the first dead end, ``len(data)`` if the input is only
    incomplete, or ``None`` when ``data`` is accepted."""
    rec = compile_grammar(grammar)
    sid = rec.initial_id
    for i, b in enumerate(data):
        sid = rec.step(sid, b)
        if sid == rec.rejected_id:
            return i
    return None if rec.is_accepting(sid) else len(data)
