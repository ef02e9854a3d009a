import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from icesearch.tabular import make_dataset

ACCEPTANCE_LINES = []


def planted_dataset(n=1000, n_features=10, noise=0.1, seed=7):
    """Binary features; label = majority vote of features 0, 1, 2 with label noise."""
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 2, size=(n, n_features)).astype(float)
    y = (X[:, :3].sum(axis=1) >= 2).astype(int)
    y[rng.random(n) < noise] ^= 1
    names = [f"f{j}" for j in range(n_features)]
    return make_dataset(X, y, names, "predicting the planted outcome")


def write_csv(dataset, path, target="outcome"):
    """Write a dataset as a CSV with the target as last column."""
    lines = [",".join([*dataset.feature_names, target])]
    for row, label in zip(dataset.X, dataset.y):
        lines.append(",".join([*(f"{v:g}" for v in row), "yes" if label else "no"]))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_config(path, **fields):
    path.write_text(json.dumps(fields))
    return path


@pytest.fixture(scope="session")
def planted():
    return planted_dataset()


class ChatServer:
    """Minimal chat-completion server; ``reply(prompt, n)`` returns (status, body)."""

    def __init__(self, reply):
        self.reply = reply
        self.requests = []
        server = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                server.requests.append({"path": self.path, "body": body,
                                        "auth": self.headers.get("Authorization")})
                status, payload = server.reply(body["messages"][0]["content"], len(server.requests))
                data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self):
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/v1"

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


def completion(text):
    return {"id": "x", "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}]}


@pytest.fixture
def chat_server():
    servers = []

    def start(reply):
        s = ChatServer(reply)
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.close()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
