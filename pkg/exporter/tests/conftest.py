import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest


class MockCompletions:
    """In-process OpenAI-compatible /v1/completions stand-in.

    Behavior switches on the requested model name:
      fixed        -> token_logprobs [-1.0, -3.0], text " four"
      no-logprobs  -> well-formed response without a logprobs block
      flaky        -> alternates HTTP 500 and success per request
      broken       -> always HTTP 500
    """

    def __init__(self):
        self.prompts: list[str] = []
        self.request_count = 0
        self._lock = threading.Lock()
        handler = self._make_handler()
        self.server = ThreadingHTTPServer(("127.0.0.1", 0), handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address
        return f"http://{host}:{port}/v1"

    def close(self):
        self.server.shutdown()
        self.server.server_close()

    def _make_handler(mock):
        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                body = json.loads(self.rfile.read(length))
                with mock._lock:
                    mock.request_count += 1
                    count = mock.request_count
                    mock.prompts.append(body.get("prompt", ""))
                model = body.get("model", "fixed")
                if model == "broken" or (model == "flaky" and count % 2 == 1):
                    self.send_response(500)
                    self.end_headers()
                    return
                choice = {"text": " four", "index": 0, "finish_reason": "length"}
                if model != "no-logprobs":
                    choice["logprobs"] = {
                        "tokens": [" fo", "ur"],
                        "token_logprobs": [-1.0, -3.0],
                    }
                payload = {"object": "text_completion", "choices": [choice]}
                data = json.dumps(payload).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        return Handler


@pytest.fixture
def mock_endpoint():
    mock = MockCompletions()
    yield mock
    mock.close()


@pytest.fixture
def questions_file(tmp_path):
    path = tmp_path / "questions.jsonl"
    rows = [
        {"id": "q1", "question": "1+1=?"},
        {"id": "q2", "question": "2+2=?"},
    ]
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n", encoding="utf-8")
    return path
