import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from remodiff.text import (
    FixtureProvider,
    ProviderConfig,
    RemoteProvider,
    StubProvider,
    TransportError,
    UnknownCaptionError,
    make_provider,
    tokenize,
    write_fixture,
)


def test_stub_deterministic_and_unit():
    p = StubProvider(seed=3)
    a = p.embed_sentence("a person walks").vector
    b = StubProvider(seed=3).embed_sentence("a person walks").vector
    assert a.tobytes() == b.tobytes()
    assert abs(np.linalg.norm(a) - 1) <= 1e-12


def test_stub_seed_changes_output():
    a = StubProvider(seed=0).embed_sentence("a person walks").vector
    b = StubProvider(seed=1).embed_sentence("a person walks").vector
    assert not np.allclose(a, b)


def test_stub_distinct_strings():
    p = StubProvider(seed=0)
    cos = p.embed_sentence("a person walks").vector @ p.embed_sentence("someone kicks twice").vector
    assert -1 < cos < 1
    assert cos == StubProvider(seed=0).embed_sentence("a person walks").vector @ StubProvider(
        seed=0
    ).embed_sentence("someone kicks twice").vector


def test_stub_shared_words_increase_similarity():
    p = StubProvider(seed=0, d_text=256)
    base = p.embed_sentence("a person walks slowly").vector
    close = p.embed_sentence("a person walks quickly").vector
    far = p.embed_sentence("somebody dances wildly tonight").vector
    assert base @ close > base @ far


def test_stub_tokens():
    p = StubProvider(seed=0, d_text=16)
    tf = p.embed_tokens("a person walks")
    assert tf.matrix.shape == (3, 16) and tf.last_index == 2
    one = p.embed_tokens("jump")
    assert one.matrix.shape == (1, 16) and one.last_index == 0


@pytest.mark.parametrize("text", ["a person walks", "The man, quickly, runs forward.", "x-shape arms"])
def test_token_count_matches_tokenizer(text):
    assert StubProvider().embed_tokens(text).n_tokens == len(tokenize(text))


def test_empty_text_rejected():
    with pytest.raises(ValueError):
        StubProvider().embed_sentence("   ")


def test_fixture_roundtrip(tmp_path):
    path = tmp_path / "fx.jsonl"
    raw = np.arange(1.0, 513.0)
    tokens = np.random.default_rng(0).normal(size=(3, 512))
    path.write_text(json.dumps({"text": "a person walks", "sentence": raw.tolist(), "tokens": tokens.tolist()}) + "\n")
    p = FixtureProvider(path)
    np.testing.assert_allclose(p.embed_sentence("a person walks").vector, raw / np.linalg.norm(raw))
    np.testing.assert_array_equal(p.embed_tokens("a person walks").matrix, tokens)
    assert p.d_text == 512
    with pytest.raises(UnknownCaptionError):
        p.embed_sentence("a person runs")


def test_write_fixture_matches_stub(tmp_path):
    stub = StubProvider(seed=2, d_text=8)
    write_fixture(tmp_path / "fx.jsonl", stub, ["a b", "c"])
    fx = FixtureProvider(tmp_path / "fx.jsonl")
    np.testing.assert_allclose(fx.embed_sentence("a b").vector, stub.embed_sentence("a b").vector, atol=1e-15)


class _Handler(BaseHTTPRequestHandler):
    calls = 0
    fail_first = 0

    def do_POST(self):  # noqa: N802
        type(self).calls += 1
        if type(self).calls <= type(self).fail_first:
            self.send_response(500)
            self.end_headers()
            return
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        feats = StubProvider(seed=9, d_text=4)
        out = {
            "sentence": feats.embed_sentence(body["text"]).vector.tolist(),
            "tokens": feats.embed_tokens(body["text"]).matrix.tolist(),
        }
        data = json.dumps(out).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.calls = 0
    _Handler.fail_first = 0
    srv = HTTPServer(("127.0.0.1", 0), _Handler)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    yield srv
    srv.shutdown()


def test_remote_caches(server):
    p = RemoteProvider(f"http://127.0.0.1:{server.server_port}", backoff=0.01)
    a = p.embed_sentence("a person walks").vector
    b = p.embed_tokens("a person walks").matrix
    p.embed_sentence("a person walks")
    assert _Handler.calls == 1
    np.testing.assert_allclose(a, StubProvider(seed=9, d_text=4).embed_sentence("a person walks").vector)
    assert b.shape == (3, 4)


def test_remote_retries_then_succeeds(server):
    _Handler.fail_first = 2
    p = RemoteProvider(f"http://127.0.0.1:{server.server_port}", backoff=0.01)
    p.embed_sentence("hello")
    assert _Handler.calls == 3


def test_remote_gives_up(server):
    _Handler.fail_first = 10
    p = RemoteProvider(f"http://127.0.0.1:{server.server_port}", backoff=0.01)
    with pytest.raises(TransportError) as err:
        p.embed_sentence("hello")
    assert err.value.retries == 3


def test_make_provider_validation():
    with pytest.raises(ValueError):
        make_provider(ProviderConfig(backend="clip"))
    with pytest.raises(ValueError):
        make_provider(ProviderConfig(backend="fixture"))
    assert make_provider(ProviderConfig(seed=4)).fingerprint == "stub:4:64"
