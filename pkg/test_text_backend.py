import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import httpx
import pytest

from app.config.settings import BackendConfig
from app.services.corpus import ItemInfo, generate_item_profile
from app.services.text_backend import (
    DISTILL,
    ITEM_PROFILE,
    ExternalBackend,
    TemplateBackend,
    aspect_keywords,
    make_backend,
    split_words,
    truncate_words,
)
from app.utils.errors import BackendError


def _backend(handler, **kwargs):
    kwargs.setdefault("backoff", 0.0)
    return ExternalBackend("http://textgen.test", "stub-model", transport=httpx.MockTransport(handler), **kwargs)


def test_split_and_truncate_use_ascii_whitespace():
    assert split_words(" a\tb\n\nc ") == ["a", "b", "c"]
    assert truncate_words("one two three", 2) == "one two"
    assert truncate_words("  one two ", 5) == "one two"


def test_aspect_keywords_drop_stop_words_and_repeats():
    assert aspect_keywords("The plot, the PLOT and the pacing!") == ["plot", "pacing"]


def test_template_backend_is_deterministic_and_capped():
    backend = TemplateBackend()
    fields = {"metadata": {"name": "Noodle House", "categories": ["Ramen"]}, "reviews": ["rich broth"]}
    first = backend.complete(ITEM_PROFILE, "ignored", fields, max_words=50, seed=1)
    assert first == backend.complete(ITEM_PROFILE, "different prompt", fields, max_words=50, seed=1)
    assert first.provenance == "template"
    assert "Noodle House" in first.text and "Ramen" in first.text
    assert len(split_words(backend.complete(ITEM_PROFILE, "", fields, max_words=3).text)) == 3


def test_template_backend_rejects_unknown_task():
    with pytest.raises(BackendError):
        TemplateBackend().complete("poetry", "", {})


def test_external_backend_sends_contract_and_reads_text():
    seen = {}

    def handler(request):
        seen["body"] = json.loads(request.content)
        seen["auth"] = request.headers.get("authorization")
        seen["path"] = request.url.path
        return httpx.Response(200, json={"text": "canned profile text"})

    completion = _backend(handler, token="s3cret").complete(DISTILL, "the prompt", {}, max_words=12)
    assert completion.text == "canned profile text"
    assert completion.provenance == "external"
    assert seen == {
        "body": {"model": "stub-model", "prompt": "the prompt", "max_words": 12},
        "auth": "Bearer s3cret",
        "path": "/generate",
    }


def test_external_backend_retries_server_errors():
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, json={"text": "ok"})

    assert _backend(handler, retries=3).complete(DISTILL, "p", {}).text == "ok"
    assert len(calls) == 3


def test_external_backend_gives_up_with_status():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500)

    with pytest.raises(BackendError) as info:
        _backend(handler, retries=2).complete(DISTILL, "p", {})
    assert info.value.status_code == 500
    assert len(calls) == 3


def test_client_errors_are_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(404)

    with pytest.raises(BackendError) as info:
        _backend(handler).complete(DISTILL, "p", {})
    assert info.value.status_code == 404
    assert len(calls) == 1


def test_malformed_payload_is_a_backend_error():
    with pytest.raises(BackendError, match="malformed"):
        _backend(lambda request: httpx.Response(200, json={"answer": 1})).complete(DISTILL, "p", {})


def test_unreachable_backend_falls_back_when_configured():
    def handler(request):
        raise httpx.ConnectError("refused", request=request)

    backend = _backend(handler, retries=0, fallback=TemplateBackend())
    completion = backend.complete(DISTILL, "p", {"review": "sharp knives"}, max_words=50)
    assert completion.provenance == "template"
    assert "knives" in completion.text


def test_external_output_is_truncated_to_cap():
    text = " ".join(["word"] * 80)
    completion = _backend(lambda request: httpx.Response(200, json={"text": text})).complete(DISTILL, "p", {})
    assert len(split_words(completion.text)) == 50


def test_make_backend_defaults_to_template():
    assert isinstance(make_backend(), TemplateBackend)
    external = make_backend(BackendConfig(kind="external", base_url="http://localhost:9", model="m",
                                          fallback_to_template=True))
    assert isinstance(external, ExternalBackend)
    assert isinstance(external.fallback, TemplateBackend)
    external.close()


@pytest.fixture
def canned_server():
    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            length = int(self.headers.get("Content-Length", 0))
            self.rfile.read(length)
            body = json.dumps({"text": "a canned item profile"}).encode("utf-8")
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_address[1]}"
    server.shutdown()
    server.server_close()


def test_item_profile_through_loopback_server(canned_server):
    backend = ExternalBackend(canned_server, "stub-model", timeout=5.0, retries=0)
    try:
        profile = generate_item_profile(backend, ItemInfo("i1", {"title": "T"}, [("u", "good")]))
    finally:
        backend.close()
    assert profile.text == "a canned item profile"
    assert profile.provenance == "external"
