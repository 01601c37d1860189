"""Turns (prompt, expected length) into denoiser ``Conditions`` via retrieval."""

from __future__ import annotations

import numpy as np

from .motion import MotionSequence, NormStats, normalize_frames
from .retrieval import RetrievalIndex, RetrievalResult, retrieve_by_embedding
from .smt import Conditions
from .text import TextProvider


class ConditionBuilder:
    """Caches token features, sentence embeddings and normalised database motions.

    ``index`` and ``sequences`` may be omitted for text-only conditioning.
    """

    def __init__(
        self,
        provider: TextProvider,
        stats: NormStats,
        index: RetrievalIndex | None = None,
        sequences: list[MotionSequence] | None = None,
        k: int = 2,
    ):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.provider = provider
        self.stats = stats
        self.index = index
        self.k = k
        self._motions = {s.id: normalize_frames(s.frames, stats) for s in sequences or []}
        self._captions = {s.id: list(s.captions) for s in sequences or []}
        self._tokens: dict[str, np.ndarray] = {}
        self._sentences: dict[str, np.ndarray] = {}
        self._retrieved: dict[tuple, RetrievalResult] = {}
        if index is not None:
            missing = {e.motion_ref for e in index.entries} - set(self._motions)
            if missing:
                raise KeyError(f"index refers to motions not supplied: {sorted(missing)[:5]}")

    def tokens(self, text: str) -> np.ndarray:
        if text not in self._tokens:
            self._tokens[text] = self.provider.embed_tokens(text).matrix
        return self._tokens[text]

    def sentence(self, text: str) -> np.ndarray:
        if text not in self._sentences:
            self._sentences[text] = self.provider.embed_sentence(text).vector
        return self._sentences[text]

    def retrieve(self, prompt: str, length: int, exclude: frozenset[str] = frozenset()) -> RetrievalResult:
        key = (prompt, length, exclude)
        if key not in self._retrieved:
            self._retrieved[key] = retrieve_by_embedding(self.index, self.sentence(prompt), length, self.k, exclude)
        return self._retrieved[key]

    def build(
        self, prompt: str, length: int, exclude: frozenset[str] = frozenset(), text: bool = True, retr: bool = True
    ) -> tuple[Conditions, RetrievalResult | None]:
        """Conditions for ``prompt``; retrieval runs only when an index is available and ``retr``."""
        result = None
        motions = texts = None
        if retr and self.index is not None:
            result = self.retrieve(prompt, length, frozenset(exclude))
            if result.ranked:
                motions, texts = [], []
                for eid, ref in zip(result.ids, result.motion_refs):
                    ci = int(eid.rsplit("#", 1)[1])
                    motions.append(self._motions[ref])
                    texts.append(self.tokens(self._captions[ref][ci]))
                motions, texts = tuple(motions), tuple(texts)
        return Conditions(self.tokens(prompt) if text else None, motions, texts), result
