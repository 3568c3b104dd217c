"""Key construction and retrieval over the memory library."""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .core import MemoryEntry, MemoryKey, MemoryLibrary, TaskSpec
from .embedding import Embedder, extract_keywords, unit_dot

__all__ = [
    "KeyKind",
    "KeyPolicy",
    "KeysResult",
    "make_keys",
    "keyer_for",
    "score_entry",
    "RetrieveKind",
    "RetrievePolicy",
    "ScoredEntry",
    "RetrievalResult",
    "retrieve",
]

logger = logging.getLogger(__name__)


class KeyKind(str, Enum):
    QUERY = "query"
    AVEFACT = "avefact"


@dataclass(frozen=True)
class KeyPolicy:
    """How key vectors are made from task text.

    QUERY embeds the whole description as one key. AVEFACT embeds up to
    ``max_keywords`` extracted keywords, one key each. ``hard_match``
    switches AVEFACT scoring from soft mean-of-max to exact keyword-text
    intersection; it exists for comparison runs and is off by default.
    """

    kind: KeyKind = KeyKind.QUERY
    max_keywords: int = 5
    hard_match: bool = False

    def __post_init__(self) -> None:
        if self.max_keywords < 1:
            raise ValueError(f"max_keywords must be >= 1, got {self.max_keywords}")


@dataclass(frozen=True)
class KeysResult:
    keys: tuple[MemoryKey, ...]
    fell_back_to_query: bool


def make_keys(text: str, policy: KeyPolicy, embedder: Embedder) -> KeysResult:
    """Build keys for ``text``.

    Under AVEFACT, text with no extractable keywords (e.g. all stopwords)
    falls back to a single QUERY key, and the result says so.
    """
    if policy.kind is KeyKind.AVEFACT:
        keywords = extract_keywords(text, policy.max_keywords)
        if keywords:
            vecs = embedder.embed_many(keywords)
            return KeysResult(
                keys=tuple(MemoryKey(text=kw, vec=vec) for kw, vec in zip(keywords, vecs)),
                fell_back_to_query=False,
            )
        return KeysResult(
            keys=(MemoryKey(text=text, vec=embedder.embed(text)),),
            fell_back_to_query=True,
        )
    return KeysResult(
        keys=(MemoryKey(text=text, vec=embedder.embed(text)),),
        fell_back_to_query=False,
    )


def keyer_for(policy: KeyPolicy, embedder: Embedder):
    """Adapt a key policy to the plain ``Keyer`` callable builders take."""

    def keyer(text: str) -> tuple[MemoryKey, ...]:
        return make_keys(text, policy, embedder).keys

    return keyer


def score_entry(task_keys: Sequence[MemoryKey], entry: MemoryEntry, policy: KeyPolicy) -> float:
    """Score one entry against the task keys.

    QUERY compares the task key against the entry's primary key (keys[0] by
    construction). AVEFACT is the mean over task keys of the best match among
    all entry keys; with ``hard_match`` only exact keyword-text matches count
    and unmatched task keywords contribute zero. Stored vectors are
    unit-or-zero, so a plain dot product is the cosine.
    """
    if not task_keys:
        raise ValueError("task_keys must be non-empty")
    if not entry.keys:
        logger.warning("entry %s has no keys; scoring 0", entry.entry_id)
        return 0.0
    if policy.kind is KeyKind.QUERY:
        return unit_dot(task_keys[0].vec, entry.keys[0].vec)
    if policy.hard_match:
        by_text: dict[str, MemoryKey] = {}
        for key in entry.keys:
            by_text.setdefault(key.text, key)
        total = sum(
            unit_dot(tk.vec, by_text[tk.text].vec) for tk in task_keys if tk.text in by_text
        )
        return total / len(task_keys)
    total = 0.0
    for task_key in task_keys:
        best = max(unit_dot(task_key.vec, key.vec) for key in entry.keys)
        total += best
    return total / len(task_keys)


class RetrieveKind(str, Enum):
    RANDOM = "random"
    BY_KEY = "by_key"


@dataclass(frozen=True)
class RetrievePolicy:
    kind: RetrieveKind = RetrieveKind.BY_KEY
    k: int = 1
    key_policy: KeyPolicy = field(default_factory=KeyPolicy)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class ScoredEntry:
    entry: MemoryEntry
    score: float

    @property
    def entry_id(self) -> str:
        return self.entry.entry_id


@dataclass(frozen=True)
class RetrievalResult:
    ranked: tuple[ScoredEntry, ...]
    policy_label: str
    fell_back_to_query: bool
    library_generation: int

    @property
    def entry_ids(self) -> tuple[str, ...]:
        return tuple(s.entry.entry_id for s in self.ranked)

    @property
    def contents(self) -> tuple[str, ...]:
        return tuple(s.entry.content for s in self.ranked)


def retrieve(
    library: MemoryLibrary,
    task: TaskSpec | str,
    policy: RetrievePolicy,
    embedder: Embedder,
) -> RetrievalResult:
    """Rank Active entries and return the top k.

    BY_KEY orders by (score desc, success_count desc, entry_id asc); RANDOM
    draws a seeded shuffle of the id-ordered Active set, so for a fixed seed
    the k=j result is a prefix of the k=j' result whenever j <= j'. Returned
    entries get their retrieved_count bumped.
    """
    description = task.description if isinstance(task, TaskSpec) else task
    generation, active = library.snapshot_active()
    fell_back = False
    if policy.kind is RetrieveKind.RANDOM:
        order = list(active)  # snapshot is already entry_id-ordered
        random.Random(f"random:{policy.seed}").shuffle(order)
        chosen = order[: policy.k]
        ranked = tuple(ScoredEntry(entry=e, score=0.0) for e in chosen)
        label = f"random(seed={policy.seed})"
    else:
        keys_result = make_keys(description, policy.key_policy, embedder)
        fell_back = keys_result.fell_back_to_query
        effective = KeyPolicy(kind=KeyKind.QUERY) if fell_back else policy.key_policy
        scored = [
            ScoredEntry(entry=e, score=score_entry(keys_result.keys, e, effective))
            for e in active
        ]
        scored.sort(key=lambda s: (-s.score, -s.entry.stats.success_count, s.entry.entry_id))
        ranked = tuple(scored[: policy.k])
        label = f"by_key({policy.key_policy.kind.value})"
        if fell_back:
            label += "+query_fallback"
    library.note_retrieved([s.entry.entry_id for s in ranked])
    return RetrievalResult(
        ranked=ranked,
        policy_label=label,
        fell_back_to_query=fell_back,
        library_generation=generation,
    )
