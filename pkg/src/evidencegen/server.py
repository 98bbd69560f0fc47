"""Reference HTTP server for the backend and scorer wire protocols.

Wraps any in-process backend (typically the n-gram mock) and, optionally,
similarity / NLI scorers, so the remote clients can be exercised end to end.
"""

from __future__ import annotations

import base64
import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

logger = logging.getLogger(__name__)


def make_server(host: str = "127.0.0.1", port: int = 0, backend=None, similarity=None, nli=None,
                logits_mode: str = "full") -> ThreadingHTTPServer:
    """Build (but do not start) a server; ``port=0`` picks a free port."""

    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            logger.debug("%s " + fmt, self.address_string(), *args)

        def _send(self, status: int, body: dict) -> None:
            data = json.dumps(body).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def _body(self) -> dict:
            length = int(self.headers.get("Content-Length", 0))
            return json.loads(self.rfile.read(length) or b"{}")

        def do_GET(self):
            if backend is not None and self.path == "/handshake":
                v = backend.vocabulary
                self._send(200, {"vocab_size": len(v), "eos_id": v.eos_id,
                                 "model": backend.descriptor.model_label, "logits": logits_mode})
            elif backend is not None and self.path == "/vocab":
                toks = [base64.b64encode(t).decode("ascii") for t in backend.vocabulary.tokens]
                self._send(200, {"tokens": toks})
            else:
                self._send(404, {"error": f"unknown path {self.path}"})

        def do_POST(self):
            try:
                body = self._body()
                if backend is not None and self.path == "/logits":
                    lv = backend.next_logits(body["context"])
                    self._send(200, {"logits": lv.scores.tolist()})
                elif backend is not None and self.path == "/tokenize":
                    data = base64.b64decode(body["data"])
                    self._send(200, {"tokens": backend.tokenize(data)})
                elif backend is not None and self.path == "/detokenize":
                    data = backend.detokenize(body["tokens"])
                    self._send(200, {"data": base64.b64encode(data).decode("ascii")})
                elif similarity is not None and self.path == "/similarity":
                    self._send(200, {"scores": [similarity.score(a, b) for a, b in body["pairs"]]})
                elif nli is not None and self.path == "/contradiction":
                    probs = [nli.contradiction_prob(p, h) for p, h in body["pairs"]]
                    self._send(200, {"probs": probs})
                else:
                    self._send(404, {"error": f"unknown path {self.path}"})
            except (KeyError, ValueError, TypeError) as exc:
                self._send(400, {"error": str(exc)})

    return ThreadingHTTPServer((host, port), Handler)


def serve_in_thread(server: ThreadingHTTPServer) -> threading.Thread:
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return thread


def server_url(server: ThreadingHTTPServer) -> str:
    host, port = server.server_address[:2]
    return f"http://{host}:{port}"
