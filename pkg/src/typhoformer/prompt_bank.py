"""Resolve windows to prompt embeddings.

Lookup order for a record: imported embedding, else embed the imported
prompt text, else embed the template prompt. Nothing is ever dropped.
"""

from __future__ import annotations

from datetime import datetime
from typing import Mapping, Sequence

import numpy as np

from .embedding import DEFAULT_DIM, Embedder, HashedTokenEmbedder, PromptEmbedding
from .features import Window
from .hurdat2 import StormId, StormRecord
from .prompts import PromptText, resolve_prompt

Key = tuple[StormId, datetime]


class PromptBank:
    def __init__(
        self,
        embedder: Embedder | None = None,
        prompt_cache: Mapping[Key, PromptText] | None = None,
        embeddings: Mapping[Key, PromptEmbedding] | None = None,
        dim: int = DEFAULT_DIM,
    ):
        self.embedder = embedder if embedder is not None else HashedTokenEmbedder(dim)
        self.dim = self.embedder.dim
        self.prompt_cache = dict(prompt_cache or {})
        self.embeddings = dict(embeddings or {})
        for emb in self.embeddings.values():
            if emb.dim != self.dim:
                raise ValueError(f"imported embedding dim {emb.dim} != {self.dim}")
        self._memo: dict[Key, PromptEmbedding] = {}

    def text(self, storm: StormId, record: StormRecord) -> PromptText:
        return resolve_prompt(storm, record, self.prompt_cache)

    def embedding(self, storm: StormId, record: StormRecord) -> PromptEmbedding:
        key = (storm, record.timestamp)
        hit = self.embeddings.get(key) or self._memo.get(key)
        if hit is None:
            hit = self.embedder.embed(self.text(storm, record).text)
            self._memo[key] = hit
        return hit

    def window_vector(self, window: Window, mode: str = "last") -> np.ndarray:
        """``(d_txt,)`` for ``mode='last'``; ``(T, d_txt)`` for ``'per_step'``."""
        if mode == "last":
            return self.embedding(window.storm, window.last_record).mean
        if mode == "per_step":
            return np.stack([self.embedding(window.storm, r).mean for r in window.input_records])
        raise ValueError(f"unknown prompt mode {mode!r}")

    def window_vectors(self, windows: Sequence[Window], mode: str = "last") -> np.ndarray:
        if not windows:
            shape = (0, self.dim) if mode == "last" else (0, 0, self.dim)
            return np.zeros(shape)
        return np.stack([self.window_vector(w, mode) for w in windows])
