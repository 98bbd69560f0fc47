import socket

import numpy as np
import pytest

from evidencegen.backends import (
    LOG_ZERO,
    BackendConnectionError,
    BackendProtocolError,
    RemoteBackend,
    TokenizationError,
    build_mock_from_corpus,
)
from evidencegen.grammar import build_highlight_grammar, tokenize_words
from evidencegen.metrics import RemoteNliScorer, RemoteSimilarityScorer, TableNliScorer, TokenF1Scorer
from evidencegen.recognizer import accepts_string
from evidencegen.sampler import LogitVector, SamplerConfig, decode_constrained, softmax
from evidencegen.server import make_server, serve_in_thread, server_url


def test_bigram_argmax():
    m = build_mock_from_corpus(b"a b a b", order=2)
    a = m.tokenize(b"a")
    assert m.vocabulary.tokens[int(np.argmax(m.next_logits(a).scores))] == b" b"


def test_vocabulary_layout():
    m = build_mock_from_corpus(b"a b", order=2)
    assert m.vocabulary.tokens == (b"a", b" b", b"")
    assert len(m.vocabulary) == 3 and m.vocabulary.eos_id == 2
    fb = build_mock_from_corpus(b"a b", order=2, byte_fallback=True)
    assert len(fb.vocabulary) == 2 + 255 + 1  # b"a" is already a corpus token
    assert fb.vocabulary.tokens[-1] == b""


def test_counts_and_smoothing():
    m = build_mock_from_corpus(b"a b\na c", order=2, smoothing=0.0)
    p = softmax(m.next_logits(m.tokenize(b"a")))
    ids = {t: i for i, t in enumerate(m.vocabulary.tokens)}
    assert p[ids[b" b"]] == pytest.approx(0.5) and p[ids[b" c"]] == pytest.approx(0.5)
    assert m.next_logits(m.tokenize(b"a")).scores[ids[b"a"]] == LOG_ZERO
    s = build_mock_from_corpus(b"a b\na c", order=2, smoothing=1.0)
    p = softmax(s.next_logits(s.tokenize(b"a")))
    # (1 + 1) / (2 + 1 * V) with V = 4
    assert p[ids[b" b"]] == pytest.approx(2 / 6)


def test_unseen_context_is_uniform():
    m = build_mock_from_corpus(b"a b", order=3)
    p = softmax(m.next_logits([1, 1]))
    np.testing.assert_allclose(p, np.full(3, 1 / 3))


def test_sequence_start_uses_shorter_context():
    m = build_mock_from_corpus(b"x y z", order=3)
    p = softmax(m.next_logits([]))
    assert m.vocabulary.tokens[int(np.argmax(p))] == b"x"


def test_tokenize_round_trip_and_errors():
    m = build_mock_from_corpus(b"hello world", order=2)
    assert m.detokenize(m.tokenize(b"hello world")) == b"hello world"
    with pytest.raises(TokenizationError):
        m.tokenize(b"unknown")
    fb = build_mock_from_corpus(b"hello world", order=2, byte_fallback=True)
    text = "héllo, wörld\n".encode()
    assert fb.detokenize(fb.tokenize(text)) == text


def test_logits_are_fresh_copies():
    m = build_mock_from_corpus(b"a b", order=2)
    first = m.next_logits([0])
    first.scores[:] = 0
    assert m.next_logits([0]).scores[0] == LOG_ZERO


def test_order_validation():
    with pytest.raises(ValueError):
        build_mock_from_corpus(b"a", order=0)
    with pytest.raises(ValueError):
        build_mock_from_corpus(b"   \n", order=2)


@pytest.fixture
def served():
    servers = []

    def start(**kwargs):
        server = make_server("127.0.0.1", 0, **kwargs)
        serve_in_thread(server)
        servers.append(server)
        return server_url(server)

    yield start
    for s in servers:
        s.shutdown()
        s.server_close()


def test_remote_matches_local_mock(served):
    text = b'she said "stop" twice'
    local = build_mock_from_corpus(b"she said stop\n" + text, order=2, smoothing=0.1, byte_fallback=True)
    remote = RemoteBackend(served(backend=local))
    assert remote.vocabulary == local.vocabulary
    assert remote.tokenize(text) == local.tokenize(text)
    assert remote.detokenize(local.tokenize(text)) == text
    np.testing.assert_array_equal(remote.next_logits([0, 1]).scores, local.next_logits([0, 1]).scores)
    grammar = build_highlight_grammar(tokenize_words(text))
    cfg = SamplerConfig(seed=3, max_tokens=60)
    a = decode_constrained(local, [], grammar, local.vocabulary, cfg)
    b = decode_constrained(remote, [], grammar, remote.vocabulary, cfg)
    assert a == b
    if a.stop_reason == "eos":
        assert accepts_string(grammar, a.text)


class _ShortLogits:
    def __init__(self, inner, drop=1, value=None):
        self.inner, self.drop, self.value = inner, drop, value
        self.descriptor = inner.descriptor
        self.vocabulary = inner.vocabulary

    def next_logits(self, context):
        scores = self.inner.next_logits(context).scores
        if self.value is not None:
            scores = scores.copy()
            scores[0] = self.value
            return LogitVector(scores)
        return LogitVector(scores[: len(scores) - self.drop])

    def tokenize(self, data):
        return self.inner.tokenize(data)

    def detokenize(self, ids):
        return self.inner.detokenize(ids)


def test_remote_rejects_wrong_length_logits(served):
    inner = build_mock_from_corpus(b"a b", order=2)
    remote = RemoteBackend(served(backend=_ShortLogits(inner)))
    with pytest.raises(BackendProtocolError, match="expected 3 logits"):
        remote.next_logits([0])


def test_remote_rejects_topk_handshake(served):
    inner = build_mock_from_corpus(b"a b", order=2)
    with pytest.raises(BackendProtocolError, match="full"):
        RemoteBackend(served(backend=inner, logits_mode="top_k"))


def test_unreachable_endpoint_fails_fast():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    with pytest.raises(BackendConnectionError):
        RemoteBackend(f"http://127.0.0.1:{port}", timeout=1.0, retries=0)


def test_remote_scorers(served):
    table = TableNliScorer({("p", "h"): 0.25})
    url = served(similarity=TokenF1Scorer(), nli=table)
    sim = RemoteSimilarityScorer(url)
    assert sim.score("a b", "a b") == 1.0
    assert sim.score_many([("a b", "a c"), ("x", "y")]) == [0.5, 0.0]
    assert RemoteNliScorer(url).contradiction_prob("p", "h") == 0.25


def test_remote_rejects_non_finite_logits(served):
    inner = build_mock_from_corpus(b"a b", order=2)
    remote = RemoteBackend(served(backend=_ShortLogits(inner, value=float("nan"))))
    with pytest.raises(BackendProtocolError, match="finite"):
        remote.next_logits([0])
