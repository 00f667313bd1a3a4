"""Deterministic hashed-token text embeddings.

Each token is hashed with 64-bit FNV-1a; the hash seeds a splitmix64 stream
that fills a vector with values in (-1, 1), which is then L2-normalized.
Pure integer arithmetic, so vectors are identical on every platform.

Any object with ``embed(text) -> PromptEmbedding`` can stand in for
``HashedTokenEmbedder``; ``load_embeddings`` reads externally computed
vectors keyed by storm and timestamp.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from datetime import datetime
from functools import lru_cache
from pathlib import Path
from typing import Protocol

import numpy as np

from .hurdat2 import StormId

MASK64 = 0xFFFFFFFFFFFFFFFF
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
DEFAULT_DIM = 64

# Decimal numbers stay whole; everything else splits on non-word characters.
_TOKEN = re.compile(r"\d+(?:\.\d+)+|\w+")


class EmptyText(ValueError):
    pass


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(state: int) -> tuple[int, int]:
    """Advance the state; return ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def tokenize(text: str) -> list[str]:
    tokens = _TOKEN.findall(text.lower())
    if not tokens:
        raise EmptyText("text contains no tokens")
    return tokens


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int) -> tuple[float, ...]:
    state = fnv1a_64(token.encode("utf-8"))
    out = []
    for _ in range(dim):
        state, z = splitmix64(state)
        # 52 high bits, centred in their cell: exact and strictly inside (-1, 1)
        out.append(((z >> 12) + 0.5) * 2.0 ** -51 - 1.0)
    norm = math.sqrt(math.fsum(x * x for x in out))
    return tuple(x / norm for x in out)


def token_vector(token: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    return np.asarray(_token_vector(token, dim))


@dataclass(frozen=True)
class PromptEmbedding:
    tokens: np.ndarray  # (M, d_txt)
    mean: np.ndarray  # (d_txt,)

    @classmethod
    def from_tokens(cls, tokens: np.ndarray) -> "PromptEmbedding":
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 2 or tokens.shape[0] < 1:
            raise ValueError("need at least one token vector")
        # fsum: correctly rounded, so the mean is bit-identical everywhere
        mean = np.array([math.fsum(col) for col in tokens.T]) / tokens.shape[0]
        return cls(tokens=tokens, mean=mean)

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> PromptEmbedding: ...


class HashedTokenEmbedder:
    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 8:
            raise ValueError("embedding dimension must be >= 8")
        self.dim = dim

    def embed(self, text: str) -> PromptEmbedding:
        return PromptEmbedding.from_tokens(
            np.stack([token_vector(t, self.dim) for t in tokenize(text)])
        )


def embed(text: str, d_txt: int = DEFAULT_DIM) -> PromptEmbedding:
    return HashedTokenEmbedder(d_txt).embed(text)


class MalformedEmbeddingFile(ValueError):
    pass


def embedding_key(storm: StormId, timestamp: datetime) -> str:
    return f"{storm.key}@{timestamp:%Y%m%d%H%M}"


def load_embeddings(path: str | Path) -> dict[tuple[StormId, datetime], PromptEmbedding]:
    """Read ``key|d_txt|v1,v2,...`` lines; several lines per key are token rows.

    ``key`` is ``AL142024_MILTON@202410100030``. Rows are L2-normalized on
    import so they satisfy the same contract as the hashed embedder.
    """
    rows: dict[tuple[StormId, datetime], list[np.ndarray]] = {}
    dims: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                key, dim_text, values = line.split("|")
                storm_key, _, stamp = key.partition("@")
                storm = StormId.from_key(storm_key)
                timestamp = datetime.strptime(stamp, "%Y%m%d%H%M")
                dim = int(dim_text)
                vec = np.array([float(v) for v in values.split(",")])
            except ValueError as exc:
                raise MalformedEmbeddingFile(f"line {line_no}: {exc}") from None
            norm = float(np.sqrt(vec @ vec))
            if vec.shape != (dim,) or not np.isfinite(norm) or norm == 0.0:
                raise MalformedEmbeddingFile(f"line {line_no}: bad vector for {key}")
            dims.add(dim)
            rows.setdefault((storm, timestamp), []).append(vec / norm)
    if len(dims) > 1:
        raise MalformedEmbeddingFile(f"mixed embedding dimensions {sorted(dims)}")
    return {k: PromptEmbedding.from_tokens(np.stack(v)) for k, v in rows.items()}
