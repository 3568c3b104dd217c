"""Deterministic hashed text embeddings, keyword extraction, and the remote embedder client."""

from __future__ import annotations

import hashlib
import math
import re
from functools import lru_cache
from importlib import resources
from typing import Protocol, Sequence

import requests

from .core import ProcmemError

__all__ = [
    "EmbeddingError",
    "DEFAULT_DIM",
    "LOCAL_BACKEND_ID",
    "tokenize",
    "content_tokens",
    "stopwords",
    "stopword_file_hash",
    "fnv1a_64",
    "embed_text",
    "cosine",
    "unit_dot",
    "corpus_doc_freq",
    "extract_keywords",
    "Embedder",
    "LocalEmbedder",
    "RemoteEmbedder",
]


class EmbeddingError(ProcmemError):
    """An embedding backend failed or returned malformed vectors."""


DEFAULT_DIM = 256
LOCAL_BACKEND_ID = "fnv1a64-bow-v1"

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_MASK64 = (1 << 64) - 1

_TOKEN_RE = re.compile(r"[0-9a-z]+")


def tokenize(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _TOKEN_RE.findall(text.lower())


def _data_bytes(name: str) -> bytes:
    return resources.files("procmem.data").joinpath(name).read_bytes()


@lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    words = _data_bytes("stopwords.txt").decode("utf-8").split()
    return frozenset(words)


@lru_cache(maxsize=1)
def stopword_file_hash() -> str:
    """sha256 of the shipped stopword file; stores refuse to merge across different lists."""
    return hashlib.sha256(_data_bytes("stopwords.txt")).hexdigest()


def content_tokens(text: str) -> list[str]:
    drop = stopwords()
    return [t for t in tokenize(text) if t not in drop]


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def embed_text(text: str, dim: int = DEFAULT_DIM) -> tuple[float, ...]:
    """Hash unigrams and adjacent bigrams of the stopword-filtered token stream.

    Feature index is FNV-1a-64 mod dim, sign comes from the hash's top bit,
    and the result is L2-normalized. Text with no content tokens embeds to the
    zero vector.
    """
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    toks = content_tokens(text)
    feats = list(toks)
    feats.extend(f"{a} {b}" for a, b in zip(toks, toks[1:]))
    acc = [0.0] * dim
    for feat in feats:
        h = fnv1a_64(feat.encode("utf-8"))
        if (h >> 63) & 1:
            acc[h % dim] -= 1.0
        else:
            acc[h % dim] += 1.0
    norm = math.sqrt(sum(v * v for v in acc))
    if norm == 0.0:
        return tuple(acc)
    return tuple(v / norm for v in acc)


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity; 0.0 whenever either vector is all zeros."""
    if len(u) != len(v):
        raise ValueError(f"dimension mismatch: {len(u)} vs {len(v)}")
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def unit_dot(u: Sequence[float], v: Sequence[float]) -> float:
    """Dot product. Equals cosine for the unit-or-zero vectors embed_text produces."""
    return sum(a * b for a, b in zip(u, v))


@lru_cache(maxsize=1)
def corpus_doc_freq() -> dict[str, int]:
    """Per-token document frequency over the shipped rarity corpus (one doc per line)."""
    df: dict[str, int] = {}
    for line in _data_bytes("rarity_corpus.txt").decode("utf-8").splitlines():
        for tok in set(tokenize(line)):
            df[tok] = df.get(tok, 0) + 1
    return df


def extract_keywords(text: str, max_n: int) -> list[str]:
    """Content tokens ranked rarest-first against the shipped corpus.

    Ordering key is (document frequency ascending, first occurrence ascending);
    tokens absent from the corpus count as frequency 0 and rank first.
    """
    if max_n < 0:
        raise ValueError(f"max_n must be >= 0, got {max_n}")
    first_seen: dict[str, int] = {}
    for tok in content_tokens(text):
        if tok not in first_seen:
            first_seen[tok] = len(first_seen)
    df = corpus_doc_freq()
    ranked = sorted(first_seen, key=lambda t: (df.get(t, 0), first_seen[t]))
    return ranked[:max_n]


class Embedder(Protocol):
    """Anything that turns text into fixed-dimension unit-or-zero vectors."""

    @property
    def dim(self) -> int: ...

    @property
    def backend_id(self) -> str: ...

    def embed(self, text: str) -> tuple[float, ...]: ...

    def embed_many(self, texts: Sequence[str]) -> list[tuple[float, ...]]: ...


class LocalEmbedder:
    """The in-process hashed embedder; the deterministic default backend."""

    def __init__(self, dim: int = DEFAULT_DIM) -> None:
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self._dim = dim

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def backend_id(self) -> str:
        return LOCAL_BACKEND_ID

    def embed(self, text: str) -> tuple[float, ...]:
        return embed_text(text, self._dim)

    def embed_many(self, texts: Sequence[str]) -> list[tuple[float, ...]]:
        return [embed_text(t, self._dim) for t in texts]


class RemoteEmbedder:
    """HTTP embedding backend: POST {"texts": [...]} -> {"vectors": [[...], ...]}.

    Vectors are validated against ``dim`` and re-normalized on receipt. Any
    transport or contract failure raises :class:`EmbeddingError`; a backend
    problem is never papered over with zero vectors.
    """

    def __init__(
        self,
        url: str,
        dim: int = DEFAULT_DIM,
        timeout: float = 10.0,
        backend_id: str = "remote-v1",
        session: requests.Session | None = None,
    ) -> None:
        self._url = url
        self._dim = dim
        self._timeout = timeout
        self._backend_id = backend_id
        self._session = session or requests.Session()

    @property
    def dim(self) -> int:
        return self._dim

    @property
    def backend_id(self) -> str:
        return self._backend_id

    def embed(self, text: str) -> tuple[float, ...]:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> list[tuple[float, ...]]:
        try:
            resp = self._session.post(
                self._url, json={"texts": list(texts)}, timeout=self._timeout
            )
            resp.raise_for_status()
            payload = resp.json()
        except ValueError as exc:
            # requests' JSONDecodeError is also a RequestException, so this
            # clause must come first or every bad body reads as transport.
            raise EmbeddingError(f"embedding backend returned invalid JSON: {exc}") from exc
        except requests.RequestException as exc:
            raise EmbeddingError(f"embedding backend request failed: {exc}") from exc
        vectors = payload.get("vectors") if isinstance(payload, dict) else None
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise EmbeddingError(
                f"embedding backend returned {0 if not isinstance(vectors, list) else len(vectors)}"
                f" vectors for {len(texts)} texts"
            )
        out: list[tuple[float, ...]] = []
        for pos, vec in enumerate(vectors):
            if not isinstance(vec, list) or len(vec) != self._dim:
                raise EmbeddingError(
                    f"vector {pos} has dimension {len(vec) if isinstance(vec, list) else 'n/a'},"
                    f" expected {self._dim}"
                )
            values = [float(x) for x in vec]
            norm = math.sqrt(sum(v * v for v in values))
            if norm == 0.0:
                out.append(tuple(values))
            else:
                out.append(tuple(v / norm for v in values))
        return out
