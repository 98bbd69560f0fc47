import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evidencegen.grammar import build_highlight_grammar, parse_gbnf, tokenize_words
from evidencegen.recognizer import (
    RecognizerError,
    Vocabulary,
    accepts_end,
    accepts_string,
    advance_bytes,
    allowed_token_mask,
    allowed_token_mask_reference,
    compile_grammar,
    first_rejected_offset,
    init,
)
from oracles import encode_list, is_member, mutate, random_words

EXAMPLE_TEXT = (b"Recently, I attempted suicide by consuming an unspecified amount "
                  b"of prescription medications.")


@pytest.fixture(scope="module")
def example():
    return build_highlight_grammar(tokenize_words(EXAMPLE_TEXT))


@pytest.mark.parametrize("candidate, accepted", [
    ('["Recently,"]', True),
    ('["I attempted suicide", "prescription medications."]', True),
    ('["I attempted suicide", "I attempted suicide", "Recently,"]', True),
    ('["medications."]', True),
    # t11 may take (" " t12) with t12 empty: one trailing space after the last word only
    ('["prescription medications. "]', True),
    ('["prescription "]', False),
    ('["medications.  "]', False),
    ('["prescription medication"]', False),
    ('["I suicide"]', False),
    ('["Recently, I"', False),
    ('[]', False),
    ('["Recently,", ]', False),
    ('["Recently,","I"]', False),
    ('', False),
])
def test_worked_example_membership(example, candidate, accepted):
    assert accepts_string(example, candidate) is accepted
    words = list(tokenize_words(EXAMPLE_TEXT).words)
    assert is_member(words, candidate.encode()) is accepted


def test_first_rejected_offsets(example):
    assert first_rejected_offset(example, b'["Recently,"]') is None
    # "medication" is consumed, then `"` cannot follow (the word is "medications.")
    assert first_rejected_offset(example, b'["prescription medication"]') == 25
    assert first_rejected_offset(example, b'["I suicide"]') == 4
    assert first_rejected_offset(example, b"") == 0
    assert first_rejected_offset(example, b'["Recently,"') == len(b'["Recently,"')


def test_initial_state_only_allows_bracket(example):
    rec = compile_grammar(example)
    assert rec.allowed_first_bytes(rec.initial_id) == {ord("[")}
    assert not accepts_end(init(example))


def test_mask_after_closed_item(example):
    vocab = Vocabulary((b"]", b", ", b', "', b"x", b""), 4)
    state = advance_bytes(init(example), b'["I attempted suicide"')
    mask = allowed_token_mask(state, vocab)
    assert mask.allowed.tolist() == [True, True, True, False, False]
    assert not mask.end_acceptable
    done = advance_bytes(state, b"]")
    assert allowed_token_mask(done, vocab).allowed.tolist() == [False, False, False, False, True]


def test_rejected_state_cannot_advance(example):
    bad = advance_bytes(init(example), b"x")
    assert bad.rejected
    with pytest.raises(RecognizerError):
        advance_bytes(bad, b"[")


def test_state_equality_across_chunkings(example):
    data = b'["I attempted suicide", "by'
    whole = advance_bytes(init(example), data)
    pieces = init(example)
    for i in range(len(data)):
        pieces = advance_bytes(pieces, data[i:i + 1])
    assert whole == pieces and hash(whole) == hash(pieces)


def test_left_recursion_rejected():
    with pytest.raises(RecognizerError, match="left recursion"):
        init(parse_gbnf('root ::= root "a" | "b"'))
    with pytest.raises(RecognizerError, match="left recursion"):
        init(parse_gbnf('root ::= x "a"\nx ::= ("" | "c") root'))


def test_stack_cap():
    g = parse_gbnf('root ::= "a" "b" | "a" "c" | "a" "d"')
    with pytest.raises(RecognizerError, match="exceeded"):
        init(g, max_stacks=2)
    assert accepts_string(g, "ac")


def test_general_grammar_features():
    g = parse_gbnf('root ::= "<" item ("," item)* ">"\nitem ::= ("x" | "yy")? "z"\n')
    for s, ok in [("<z>", True), ("<xz,yyz,z>", True), ("<>", False), ("<yz>", False), ("<z,>", False)]:
        assert accepts_string(g, s) is ok, s


def _vocab_for(words, rng):
    pieces = {b"[", b"]", b'"', b", ", b' "', b'["', b'"]', b'", "', b" "}
    for w in words:
        pieces.add(w)
        pieces.add(b" " + w)
        if len(w) > 1:
            pieces.add(w[: len(w) // 2])
            pieces.add(w[len(w) // 2:])
    pieces.update(bytes([rng.randrange(32, 127)]) for _ in range(10))
    return Vocabulary(tuple(sorted(pieces)) + (b"",), len(pieces))


def test_trie_mask_matches_reference_along_random_walks():
    rng = random.Random(7)
    for _ in range(40):
        words = random_words(rng)
        g = build_highlight_grammar(tokenize_words(b" ".join(words)))
        vocab = _vocab_for(words, rng)
        state = init(g)
        for _ in range(30):
            fast = allowed_token_mask(state, vocab)
            ref = allowed_token_mask_reference(state, vocab)
            assert np.array_equal(fast.allowed, ref.allowed)
            assert fast.end_acceptable == ref.end_acceptable
            choices = np.flatnonzero(fast.allowed[: vocab.eos_id])
            if len(choices) == 0:
                break
            state = advance_bytes(state, vocab.tokens[int(rng.choice(list(choices)))])
            assert not state.rejected


@settings(max_examples=200, deadline=None)
@given(st.randoms(use_true_random=False))
def test_recognizer_agrees_with_oracle(rnd):
    words = random_words(rnd, 5)
    g = build_highlight_grammar(tokenize_words(b" ".join(words)))
    i = rnd.randrange(len(words))
    j = rnd.randrange(i, len(words)) + 1
    base = encode_list([b" ".join(words[i:j])] * rnd.randint(1, 2))
    assert accepts_string(g, base)
    cand = mutate(rnd, words, base)
    assert accepts_string(g, cand) == is_member(words, cand)


@settings(max_examples=100, deadline=None)
@given(st.randoms(use_true_random=False), st.integers(0, 40))
def test_prefix_monotonicity(rnd, cut):
    words = random_words(rnd, 5)
    g = build_highlight_grammar(tokenize_words(b" ".join(words)))
    full = mutate(rnd, words, encode_list([words[0]]))
    prefix = full[:cut]
    # once a prefix is rejected, every extension is rejected too
    if advance_bytes(init(g), prefix).rejected:
        assert advance_bytes(init(g), full).rejected
    # and every prefix of an accepted string is live
    if accepts_string(g, full):
        assert not advance_bytes(init(g), prefix).rejected


def test_compile_is_cached_and_deterministic(example):
    assert compile_grammar(example) is compile_grammar(example)
    a = advance_bytes(init(example), b'["of').stacks
    b = advance_bytes(init(example), b'["of').stacks
    assert a == b
