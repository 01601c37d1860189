"""Hybrid semantic + kinematic retrieval over the training split.

Each (sequence, caption) pair becomes an entry.  For a prompt embedding f_p
and expected length L the score of entry i is

    s_i = <f_i, f_p> * exp(-lambda * |l_i - L| / max(l_i, L))

and the k best entries (ties broken by ascending id) are returned.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .motion import MotionSequence
from .text import TextProvider

INDEX_MAGIC = b"RMIX"
INDEX_VERSION = 1
DEFAULT_LAMBDA = 0.1
DEFAULT_K = 2


class IndexFormatError(ValueError):
    pass


class FingerprintMismatch(ValueError):
    pass


class EmptyIndexError(ValueError):
    pass


@dataclass(frozen=True)
class RetrievalEntry:
    id: str
    text_emb: np.ndarray
    length: int
    motion_ref: str

    @property
    def caption_index(self) -> int:
        return int(self.id.rsplit("#", 1)[1])


@dataclass
class RetrievalIndex:
    entries: list[RetrievalEntry]
    lam: float = DEFAULT_LAMBDA
    fingerprint: str = ""
    _matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate entry ids in index")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack([e.text_emb for e in self.entries]) if self.entries else np.zeros((0, 0))
        return self._matrix

    @property
    def lengths(self) -> np.ndarray:
        return np.array([e.length for e in self.entries], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class RetrievalResult:
    ranked: list[tuple[str, float]]
    k: int
    motion_refs: list[str]

    @property
    def ids(self) -> list[str]:
        return [i for i, _ in self.ranked]


def _f32(v: np.ndarray) -> np.ndarray:
    return np.asarray(v, dtype=np.float32).astype(np.float64)


def build_index(train: list[MotionSequence], provider: TextProvider, lam: float = DEFAULT_LAMBDA) -> RetrievalIndex:
    """One entry per (sequence, caption); embeddings are stored at float32 precision."""
    if not train:
        raise ValueError("build_index: empty training split")
    entries = []
    for seq in sorted(train, key=lambda s: s.id):
        for ci, caption in enumerate(seq.captions):
            try:
                emb = provider.embed_sentence(caption).vector
            except Exception as exc:
                raise type(exc)(f"embedding failed for caption {caption!r} of {seq.id}: {exc}") from exc
            entries.append(RetrievalEntry(f"{seq.id}#{ci}", _f32(emb), seq.length, seq.id))
    return RetrievalIndex(entries, float(lam), provider.fingerprint)


def length_gap(lengths: np.ndarray | float, target: float) -> np.ndarray:
    lengths = np.asarray(lengths, dtype=np.float64)
    return np.abs(lengths - target) / np.maximum(lengths, target)


def _scores(emb: np.ndarray, lengths: np.ndarray, query: np.ndarray, target: float, lam: float) -> np.ndarray:
    cos = np.clip((emb * query).sum(axis=-1), -1.0, 1.0)
    return cos * np.exp(-lam * length_gap(lengths, target))


def score(entry: RetrievalEntry, query_emb: np.ndarray, target_len: int, lam: float) -> float:
    if target_len < 1:
        raise ValueError("expected length must be >= 1")
    return float(_scores(entry.text_emb[None], np.array([entry.length]), np.asarray(query_emb), target_len, lam)[0])


def retrieve_by_embedding(
    index: RetrievalIndex,
    query_emb: np.ndarray,
    target_len: int,
    k: int = DEFAULT_K,
    exclude: frozenset[str] | set[str] = frozenset(),
    dedupe: bool = True,
) -> RetrievalResult:
    """Top-k entries by hybrid score.

    ``exclude`` drops entries whose motion_ref is listed.  With ``dedupe`` a
    motion reachable through several captions appears once, under its best
    caption.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if target_len < 1:
        raise ValueError("expected length must be >= 1")
    if not index.entries:
        raise EmptyIndexError("retrieve on an empty index")
    s = _scores(index.matrix, index.lengths, np.asarray(query_emb, dtype=np.float64), target_len, index.lam)
    order = sorted(range(len(index.entries)), key=lambda i: (-s[i], index.entries[i].id))
    ranked, refs, seen = [], [], set()
    for i in order:
        e = index.entries[i]
        if e.motion_ref in exclude or (dedupe and e.motion_ref in seen):
            continue
        seen.add(e.motion_ref)
        ranked.append((e.id, float(s[i])))
        refs.append(e.motion_ref)
        if len(ranked) == k:
            break
    return RetrievalResult(ranked, k, refs)


def retrieve(
    index: RetrievalIndex,
    provider: TextProvider,
    prompt: str,
    target_len: int,
    k: int = DEFAULT_K,
    exclude: frozenset[str] | set[str] = frozenset(),
) -> RetrievalResult:
    return retrieve_by_embedding(index, provider.embed_sentence(prompt).vector, target_len, k, exclude)


# --------------------------------------------------------------------------
# "RMIX" | u32 version | f64 lambda | u32 len + fingerprint | u32 count |
# per entry: u32 len + id | u32 l_i | u32 d | d x f32 | u32 len + motion_ref


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def index_bytes(index: RetrievalIndex) -> bytes:
    out = bytearray(INDEX_MAGIC)
    out += struct.pack("<Id", INDEX_VERSION, index.lam)
    out += _pack_str(index.fingerprint)
    out += struct.pack("<I", len(index.entries))
    for e in index.entries:
        out += _pack_str(e.id)
        out += struct.pack("<II", e.length, e.text_emb.shape[0])
        out += np.asarray(e.text_emb, dtype="<f4").tobytes()
        out += _pack_str(e.motion_ref)
    return bytes(out)


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    Path(path).write_bytes(index_bytes(index))


def load_index(path: str | Path, fingerprint: str | None = None, strict: bool = False) -> RetrievalIndex:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise IndexFormatError(f"{path}: truncated at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    def take_str() -> str:
        (n,) = struct.unpack("<I", take(4))
        return take(n).decode("utf-8")

    if take(4) != INDEX_MAGIC:
        raise IndexFormatError(f"{path}: not an index file (bad magic)")
    version, lam = struct.unpack("<Id", take(12))
    if version != INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported index version {version}")
    fp = take_str()
    if strict and fingerprint is not None and fp != fingerprint:
        raise FingerprintMismatch(f"{path}: built with provider {fp!r}, current provider is {fingerprint!r}")
    (count,) = struct.unpack("<I", take(4))
    entries = []
    for _ in range(count):
        eid = take_str()
        length, d = struct.unpack("<II", take(8))
        emb = np.frombuffer(take(4 * d), dtype="<f4").astype(np.float64)
        entries.append(RetrievalEntry(eid, emb, length, take_str()))
    if pos != len(buf):
        raise IndexFormatError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return RetrievalIndex(entries, lam, fp)
