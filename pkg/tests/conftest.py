from __future__ import annotations

import shutil
from pathlib import Path

import pytest

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def fixture_copy(tmp_path: Path) -> Path:
    """A private copy of the fixture corpus, so tests may edit it."""
    dest = tmp_path / "fixtures"
    shutil.copytree(FIXTURES, dest, ignore=shutil.ignore_patterns("build.py", "__pycache__"))
    return dest


class StubServer:
    """A local HTTP server answering from a queue of canned responses.

    Each response is ``(status, headers, body)``; the last one repeats once
    the queue is exhausted. Requests are recorded as ``(method, path, body)``.
    """

    def __init__(self, responses):
        import json
        import threading
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

        self.responses = list(responses)
        self.hits: list[tuple[str, str, bytes]] = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def _reply(self):
                length = int(self.headers.get("Content-Length") or 0)
                stub.hits.append((self.command, self.path, self.rfile.read(length)))
                status, headers, body = stub.responses.pop(0) if len(stub.responses) > 1 else stub.responses[0]
                payload = body if isinstance(body, bytes) else json.dumps(body).encode()
                self.send_response(status)
                for k, v in headers.items():
                    self.send_header(k, v)
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            do_GET = do_POST = _reply

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def start(responses):
        s = StubServer(responses)
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.close()
