import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import pytest
from PIL import Image

from neggen.backends import (BackendError, BackendUnavailable, GenerationRequest, HttpInpaintBackend, HttpScorer,
                             HttpTextBackend, ReplyParseError, call_json, call_text, check_logits, derive_seed)
from neggen.grounding import BoundingBox
from neggen.negimage import ImageEditRequest


class Server:
    """Local endpoint answering /text, /inpaint and /score from a scripted queue."""

    def __init__(self, tmp_path):
        self.queue = []
        self.seen = []
        outer = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *a):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                outer.seen.append((self.path, body, self.headers.get("Authorization")))
                status, reply = outer.queue.pop(0) if outer.queue else (200, {"text": "ok"})
                data = json.dumps(reply).encode() if not isinstance(reply, bytes) else reply
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.httpd.server_address[1]}"
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    def close(self):
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def server(tmp_path):
    s = Server(tmp_path)
    yield s
    s.close()


def test_text_backend_round_trip(server):
    server.queue = [(200, {"text": "hello"})]
    b = HttpTextBackend(server.url + "/text", token="t0k")
    resp = b.generate(GenerationRequest("p", 16, 0.1, 9))
    assert resp.text == "hello" and resp.backend_id.startswith("http:")
    path, body, auth = server.seen[0]
    assert body == {"prompt": "p", "max_tokens": 16, "temperature": 0.1, "seed": 9} and auth == "Bearer t0k"


def test_retries_on_http_error_and_junk(server):
    server.queue = [(500, {}), (200, {"text": "not json"}), (200, {"text": '{"a": 1}'})]
    got = call_json(HttpTextBackend(server.url), GenerationRequest("p", seed=1), retries=3)
    assert got == {"a": 1}
    assert [b["seed"] for _, b, _ in server.seen] == [1, 2, 3]


def test_retries_exhausted(server):
    server.queue = [(200, {"text": "x"})] * 3
    with pytest.raises(ReplyParseError):
        call_json(HttpTextBackend(server.url), GenerationRequest("p"), retries=2)


def test_empty_reply_is_error(server):
    server.queue = [(200, {"text": "  "})]
    with pytest.raises(BackendError):
        HttpTextBackend(server.url).generate(GenerationRequest("p"))


def test_unreachable_is_unavailable():
    b = HttpTextBackend("http://127.0.0.1:9/text", timeout=2)
    with pytest.raises(BackendUnavailable):
        call_text(b, GenerationRequest("p"))


def test_from_env(monkeypatch):
    monkeypatch.delenv("NEGGEN_TEXT_BACKEND_URL", raising=False)
    with pytest.raises(BackendUnavailable):
        HttpTextBackend.from_env()
    monkeypatch.setenv("NEGGEN_TEXT_BACKEND_URL", "http://x")
    monkeypatch.setenv("NEGGEN_TEXT_BACKEND_TOKEN", "abc")
    b = HttpTextBackend.from_env()
    assert b.url == "http://x" and b.token == "abc"


def _request(src):
    box = BoundingBox(0, 0, 4, 4)
    return ImageEditRequest(str(src), 8, 8, box, "a cat", "cat", "dog", ((box, "cat"),), (0,), 3)


def test_inpaint_remote_mode(server, tmp_path):
    src = tmp_path / "src.png"
    Image.new("RGB", (8, 8)).save(src)
    server.queue = [(200, {"image": base64.b64encode(src.read_bytes()).decode()})]
    out = HttpInpaintBackend(server.url, mode="remote").inpaint(_request(src), tmp_path / "o" / "out.png")
    assert out.read_bytes() == src.read_bytes()
    body = server.seen[0][1]
    assert body["box"] == [0, 0, 4, 4] and body["layout"] == [{"box": [0, 0, 4, 4], "phrase": "cat"}]
    assert base64.b64decode(body["image"]) == src.read_bytes()


def test_inpaint_local_mode_resolves_base(server, tmp_path):
    src = tmp_path / "src.png"
    Image.new("RGB", (8, 8)).save(src)
    server.queue = [(200, {"image": str(src)})]
    HttpInpaintBackend(server.url, base=tmp_path).inpaint(_request("src.png"), tmp_path / "out.png")
    assert server.seen[0][1]["image"] == str(src)
    assert (tmp_path / "out.png").read_bytes() == src.read_bytes()


def test_inpaint_errors(server, tmp_path):
    src = tmp_path / "src.png"
    Image.new("RGB", (8, 8)).save(src)
    server.queue = [(200, {"nothing": 1})]
    with pytest.raises(BackendError):
        HttpInpaintBackend(server.url).inpaint(_request(src), tmp_path / "o.png")
    with pytest.raises(ValueError):
        HttpInpaintBackend(server.url, mode="ftp")


def test_scorer(server, tmp_path):
    server.queue = [(200, {"logits": [1.0, 2.5]}), (200, {"logits": [1.0]})]
    s = HttpScorer(server.url)
    assert s.score(tmp_path / "x.png", BoundingBox(1, 2, 3, 4), ["a", "b"]) == [1.0, 2.5]
    assert server.seen[0][1] == {"image": str(tmp_path / "x.png"), "crop": [1, 2, 3, 4], "texts": ["a", "b"]}
    with pytest.raises(BackendError):
        s.score("x.png", None, ["a", "b"])


def test_check_logits():
    with pytest.raises(BackendError):
        check_logits([1.0, float("nan")], 2)
    assert check_logits([1, 2], 2) == [1.0, 2.0]


def test_derive_seed_stable():
    assert derive_seed("a", 1) == derive_seed("a", 1) != derive_seed("a", 2)
    assert 0 <= derive_seed("x") < 2 ** 63
