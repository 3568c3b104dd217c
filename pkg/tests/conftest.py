"""Shared fixtures and factories for the test suite."""

from __future__ import annotations

import random

import pytest

from procmem import (
    EntryKind,
    EntryStats,
    LocalEmbedder,
    MemoryEntry,
    MemoryKey,
    MemoryLibrary,
    Provenance,
    Step,
    TaskSpec,
    Trajectory,
)


@pytest.fixture(scope="session")
def emb():
    """Small-dimension local embedder; fast and exercises index collisions."""
    return LocalEmbedder(dim=64)


def make_key(text: str, embedder) -> MemoryKey:
    return MemoryKey(text=text, vec=embedder.embed(text))


def make_entry(
    entry_id: str,
    embedder,
    *,
    key_texts=("do the thing",),
    kind: EntryKind = EntryKind.SCRIPT,
    content: str = "SCRIPT family=f\nLOCATION loc-1\nACTIONS open\nNOTE derived from t",
    stats: EntryStats | None = None,
    status=None,
    created_group: int = 0,
) -> MemoryEntry:
    kwargs = {}
    if status is not None:
        kwargs["status"] = status
    return MemoryEntry(
        entry_id=entry_id,
        kind=kind,
        content=content,
        keys=tuple(make_key(t, embedder) for t in key_texts),
        provenance=Provenance(
            source_traj_ids=(f"src-{entry_id}",),
            builder_policy=kind.value,
            origin_agent="test",
            created_group=created_group,
        ),
        stats=stats if stats is not None else EntryStats(),
        **kwargs,
    )


def make_traj(
    traj_id: str = "t-1",
    family_id: str = "heat-egg",
    description: str = "heat the egg in the microwave",
    actions_obs=(
        ("goto loc-2", "you are at loc-2"),
        ("inspect", "you see egg"),
        ("take egg", "you take the egg"),
        ("open egg", "you open the egg"),
        ("heat egg", "you heat the egg"),
        ("finish", "done"),
    ),
    reward: float = 1.0,
) -> Trajectory:
    steps = tuple(
        Step(index=i, action=a, observation=o) for i, (a, o) in enumerate(actions_obs)
    )
    task = TaskSpec(task_id=traj_id, description=description, family_id=family_id)
    return Trajectory(traj_id=traj_id, task=task, steps=steps, reward=reward)


def random_library(
    rng: random.Random, embedder, n_entries: int, capacity: int | None = None
) -> MemoryLibrary:
    """Library with randomized key texts and stats for oracle comparisons."""
    vocab = [
        "egg", "mug", "pan", "lamp", "towel", "knife", "apple", "book",
        "heat", "clean", "open", "slice", "place", "cool", "toggle",
        "microwave", "sink", "stove", "desk", "shelf", "drawer", "counter",
    ]
    lib = MemoryLibrary(
        capacity=capacity if capacity is not None else max(n_entries, 1),
        embed_dim=embedder.dim,
    )
    entries = []
    for i in range(n_entries):
        n_keys = rng.randint(1, 3)
        key_texts = tuple(
            " ".join(rng.sample(vocab, rng.randint(1, 4))) for _ in range(n_keys)
        )
        stats = EntryStats(
            retrieved_count=rng.randint(0, 10),
            success_count=rng.randint(0, 5),
            failure_count=rng.randint(0, 5),
        )
        entries.append(
            make_entry(f"e-{i:04d}", embedder, key_texts=key_texts, stats=stats)
        )
    lib.apply_batch(add=entries)
    return lib
