"""Text-embedding providers standing in for a frozen CLIP text encoder.

Three interchangeable backends share one surface (``embed_sentence`` and
``embed_tokens``):

* ``stub``: seeded SHA-256 of each token expanded into pseudo-normal values;
  the sentence vector is the L2-normalised sum of its token vectors, so
  captions that share words get positive cosine similarity.
* ``fixture``: JSON-lines file of precomputed vectors, e.g. real CLIP output.
* ``remote``: JSON-over-HTTP service with retry and an in-process cache.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np


class UnknownCaptionError(KeyError):
    pass


class TransportError(RuntimeError):
    def __init__(self, message: str, retries: int):
        super().__init__(f"{message} (after {retries} attempts)")
        self.retries = retries


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray
    unit_norm: bool = True


@dataclass(frozen=True)
class TokenFeatures:
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ValueError(f"token features need shape (n>=1, d), got {self.matrix.shape}")

    @property
    def last_index(self) -> int:
        return self.matrix.shape[0] - 1

    @property
    def n_tokens(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class ProviderConfig:
    backend: str = "stub"
    seed: int = 0
    d_text: int = 64
    fixture_path: str | None = None
    endpoint: str | None = None

    def validate(self) -> None:
        if self.backend not in ("stub", "fixture", "remote"):
            raise ValueError(f"unknown text backend {self.backend!r}")
        if self.backend == "fixture" and not self.fixture_path:
            raise ValueError("fixture backend needs fixture_path")
        if self.backend == "remote" and not self.endpoint:
            raise ValueError("remote backend needs endpoint")
        if self.d_text < 1:
            raise ValueError("d_text must be positive")


class TextProvider(Protocol):
    fingerprint: str
    d_text: int

    def embed_sentence(self, text: str) -> TextEmbedding: ...

    def embed_tokens(self, text: str) -> TokenFeatures: ...


_TOKEN_RE = re.compile(r"[a-z0-9\-']+")


def tokenize(text: str) -> list[str]:
    """Lower-cased whitespace tokens with surrounding punctuation dropped."""
    toks = [m for w in text.lower().split() for m in _TOKEN_RE.findall(w)[:1]]
    if not toks:
        raise ValueError(f"no tokens in {text!r}")
    return toks


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("cannot normalise a zero vector")
    return v / n


def _check_text(text: str) -> None:
    if not isinstance(text, str) or not text.strip():
        raise ValueError("text must be a non-empty string")


class StubProvider:
    def __init__(self, seed: int = 0, d_text: int = 64):
        self.seed = seed
        self.d_text = d_text
        self.fingerprint = f"stub:{seed}:{d_text}"

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}\x00{token}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:16], "little"))
        return rng.standard_normal(self.d_text)

    def embed_tokens(self, text: str) -> TokenFeatures:
        _check_text(text)
        rows = [self._token_vector(t) for t in tokenize(text)]
        return TokenFeatures(np.stack([r / np.sqrt(self.d_text) for r in rows]))

    def embed_sentence(self, text: str) -> TextEmbedding:
        _check_text(text)
        total = np.sum([self._token_vector(t) for t in tokenize(text)], axis=0)
        return TextEmbedding(_unit(total))


class FixtureProvider:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._sentences: dict[str, np.ndarray] = {}
        self._tokens: dict[str, np.ndarray] = {}
        h = hashlib.sha256()
        for lineno, line in enumerate(self.path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            h.update(line.encode())
            try:
                rec = json.loads(line)
                text = rec["text"]
                self._sentences[text] = np.asarray(rec["sentence"], dtype=np.float64)
                self._tokens[text] = np.asarray(rec["tokens"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{self.path}:{lineno}: bad fixture record ({exc})") from exc
        dims = {v.shape[0] for v in self._sentences.values()}
        if len(dims) > 1:
            raise ValueError(f"{self.path}: inconsistent sentence dims {sorted(dims)}")
        self.d_text = dims.pop() if dims else 0
        self.fingerprint = f"fixture:{h.hexdigest()[:16]}"

    def embed_sentence(self, text: str) -> TextEmbedding:
        _check_text(text)
        if text not in self._sentences:
            raise UnknownCaptionError(text)
        return TextEmbedding(_unit(self._sentences[text]))

    def embed_tokens(self, text: str) -> TokenFeatures:
        _check_text(text)
        if text not in self._tokens:
            raise UnknownCaptionError(text)
        return TokenFeatures(self._tokens[text].copy())


class RemoteProvider:
    """Client for ``POST {endpoint}/embed {"text": ...} -> {"sentence", "tokens"}``."""

    def __init__(self, endpoint: str, tries: int = 3, backoff: float = 0.1, timeout: float = 10.0):
        self.endpoint = endpoint.rstrip("/")
        self.tries = tries
        self.backoff = backoff
        self.timeout = timeout
        self.fingerprint = f"remote:{self.endpoint}"
        self.d_text = 0
        self.requests_sent = 0
        self._cache: dict[str, dict] = {}
        self._lock = threading.Lock()

    def _fetch(self, text: str) -> dict:
        with self._lock:
            if text in self._cache:
                return self._cache[text]
        body = json.dumps({"text": text}).encode()
        last: Exception | None = None
        for attempt in range(self.tries):
            req = urllib.request.Request(
                f"{self.endpoint}/embed", data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            try:
                with self._lock:
                    self.requests_sent += 1
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode())
                break
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last = exc
                if attempt + 1 < self.tries:
                    time.sleep(self.backoff * 2**attempt)
        else:
            raise TransportError(f"embedding request for {text!r} failed: {last}", self.tries)
        with self._lock:
            self._cache.setdefault(text, payload)
            self.d_text = len(payload["sentence"])
            return self._cache[text]

    def embed_sentence(self, text: str) -> TextEmbedding:
        _check_text(text)
        return TextEmbedding(_unit(np.asarray(self._fetch(text)["sentence"], dtype=np.float64)))

    def embed_tokens(self, text: str) -> TokenFeatures:
        _check_text(text)
        return TokenFeatures(np.asarray(self._fetch(text)["tokens"], dtype=np.float64))


def make_provider(cfg: ProviderConfig) -> TextProvider:
    cfg.validate()
    if cfg.backend == "stub":
        return StubProvider(cfg.seed, cfg.d_text)
    if cfg.backend == "fixture":
        return FixtureProvider(cfg.fixture_path)
    return RemoteProvider(cfg.endpoint)


def write_fixture(path: str | Path, provider: TextProvider, texts: list[str]) -> None:
    """Snapshot ``provider`` outputs for ``texts`` into the fixture format."""
    with open(path, "w") as fh:
        for text in texts:
            rec = {
                "text": text,
                "sentence": provider.embed_sentence(text).vector.tolist(),
                "tokens": provider.embed_tokens(text).matrix.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
