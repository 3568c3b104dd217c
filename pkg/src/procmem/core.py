"""Core types: task trajectories, their canonical text form, and the memory library."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

__all__ = [
    "ProcmemError",
    "TrajectoryParseError",
    "TaskSpec",
    "Step",
    "Trajectory",
    "serialize_trajectory",
    "parse_trajectory",
    "whitespace_token_count",
    "EntryKind",
    "EntryStatus",
    "MemoryKey",
    "Provenance",
    "EntryStats",
    "MemoryEntry",
    "MemoryLibrary",
]


class ProcmemError(Exception):
    """Base class for all errors raised by this package."""


class TrajectoryParseError(ProcmemError, ValueError):
    """Canonical trajectory text was malformed; ``line_no`` is 1-based."""

    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


def whitespace_token_count(text: str) -> int:
    """Count whitespace-delimited tokens; the unit used for context budgets."""
    return len(text.split())


@dataclass(frozen=True)
class TaskSpec:
    """A task instance handed to an agent. ``metadata`` values are strings."""

    task_id: str
    description: str
    family_id: str = ""
    env_id: str = ""
    metadata: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class Step:
    index: int
    action: str
    observation: str
    state_note: str | None = None

    def __post_init__(self) -> None:
        if self.index < 0:
            raise ValueError(f"step index must be >= 0, got {self.index}")
        if not self.action:
            raise ValueError("step action must be non-empty")
        # Serialization splits lines at " ACT "/" OBS "; keep those out of fields.
        if "\n" in self.action or " OBS " in self.action:
            raise ValueError(f"step action may not contain newlines or ' OBS ': {self.action!r}")
        if "\n" in self.observation:
            raise ValueError("step observation may not contain newlines")


@dataclass(frozen=True)
class Trajectory:
    traj_id: str
    task: TaskSpec
    steps: tuple[Step, ...]
    reward: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"reward must be within [0, 1], got {self.reward}")
        for pos, step in enumerate(self.steps):
            if step.index != pos:
                raise ValueError(
                    f"step indices must be contiguous from 0; position {pos} has index {step.index}"
                )

    @property
    def step_count(self) -> int:
        return len(self.steps)

    @property
    def token_count(self) -> int:
        """Whitespace tokens across all actions and observations."""
        return sum(
            whitespace_token_count(s.action) + whitespace_token_count(s.observation)
            for s in self.steps
        )


def serialize_trajectory(traj: Trajectory) -> str:
    """Render a trajectory in its canonical text form.

    The format carries family_id, description, steps, and reward only;
    process-local ids are not serialized.
    """
    family_id = traj.task.family_id
    if not family_id or any(c.isspace() for c in family_id):
        raise ValueError(f"family_id must be a single non-empty token, got {family_id!r}")
    if "\n" in traj.task.description:
        raise ValueError("task description may not contain newlines")
    lines = [f"TASK {family_id} {traj.task.description}"]
    for step in traj.steps:
        lines.append(f"STEP {step.index} ACT {step.action} OBS {step.observation}")
    lines.append(f"REWARD {traj.reward!r}")
    return "\n".join(lines)


def parse_trajectory(text: str) -> Trajectory:
    """Parse canonical trajectory text; inverse of :func:`serialize_trajectory`.

    Raises :class:`TrajectoryParseError` naming the offending 1-based line.
    The returned trajectory has empty ``traj_id``/``task_id``/``env_id``.
    """
    lines = text.split("\n")
    while lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TrajectoryParseError(1, "empty trajectory text")
    header = lines[0]
    if not header.startswith("TASK "):
        raise TrajectoryParseError(1, f"expected 'TASK <family_id> <description>', got {header!r}")
    head_parts = header[5:].split(" ", 1)
    family_id = head_parts[0]
    if not family_id:
        raise TrajectoryParseError(1, "missing family_id in TASK line")
    description = head_parts[1] if len(head_parts) > 1 else ""

    steps: list[Step] = []
    reward: float | None = None
    for line_no, line in enumerate(lines[1:], start=2):
        if reward is not None:
            raise TrajectoryParseError(line_no, "content after REWARD line")
        if line.startswith("STEP "):
            body = line[5:]
            idx_text, sep, rest = body.partition(" ACT ")
            if not sep:
                raise TrajectoryParseError(line_no, "STEP line missing ' ACT '")
            try:
                index = int(idx_text)
            except ValueError:
                raise TrajectoryParseError(line_no, f"bad step index {idx_text!r}") from None
            action, sep, observation = rest.partition(" OBS ")
            if not sep:
                raise TrajectoryParseError(line_no, "STEP line missing ' OBS '")
            if index != len(steps):
                raise TrajectoryParseError(
                    line_no, f"expected step index {len(steps)}, got {index}"
                )
            if not action:
                raise TrajectoryParseError(line_no, "empty action in STEP line")
            steps.append(Step(index=index, action=action, observation=observation))
        elif line.startswith("REWARD "):
            try:
                reward = float(line[7:])
            except ValueError:
                raise TrajectoryParseError(line_no, f"bad reward {line[7:]!r}") from None
            if not 0.0 <= reward <= 1.0:
                raise TrajectoryParseError(line_no, f"reward out of range: {reward!r}")
        else:
            raise TrajectoryParseError(line_no, f"unrecognized line {line!r}")
    if reward is None:
        raise TrajectoryParseError(len(lines) + 1, "missing REWARD line")
    task = TaskSpec(task_id="", description=description, family_id=family_id)
    return Trajectory(traj_id="", task=task, steps=tuple(steps), reward=reward)


class EntryKind(str, Enum):
    VERBATIM = "verbatim"
    SCRIPT = "script"
    PROCEDURALIZED = "proceduralized"


class EntryStatus(str, Enum):
    ACTIVE = "active"
    DEPRECATED = "deprecated"


@dataclass(frozen=True)
class MemoryKey:
    """A retrieval key: the text it came from plus its embedding."""

    text: str
    vec: tuple[float, ...]


@dataclass(frozen=True)
class Provenance:
    source_traj_ids: tuple[str, ...]
    builder_policy: str
    origin_agent: str
    created_group: int = 0


@dataclass(frozen=True)
class EntryStats:
    retrieved_count: int = 0
    success_count: int = 0
    failure_count: int = 0
    revision: int = 0


@dataclass(frozen=True)
class MemoryEntry:
    entry_id: str
    kind: EntryKind
    content: str
    keys: tuple[MemoryKey, ...]
    provenance: Provenance
    stats: EntryStats = field(default_factory=EntryStats)
    status: EntryStatus = EntryStatus.ACTIVE

    def __post_init__(self) -> None:
        if not self.entry_id:
            raise ValueError("entry_id must be non-empty")
        if not self.keys:
            raise ValueError(f"entry {self.entry_id} must carry at least one key")
        if not self.content:
            raise ValueError(f"entry {self.entry_id} must have non-empty content")

    def help_rate(self) -> float:
        """success_count / retrieved_count, or 0.0 for a never-retrieved entry."""
        if self.stats.retrieved_count == 0:
            return 0.0
        return self.stats.success_count / self.stats.retrieved_count


class MemoryLibrary:
    """Thread-safe entry store with a generation counter.

    Writers commit whole batches through :meth:`apply_batch`, which bumps the
    generation exactly once per call. Readers take consistent snapshots through
    :meth:`snapshot_active`. Entries are immutable; any change replaces the
    stored object. Evicted/deprecated entries stay in the store with their
    status flipped, so the capacity bound applies to Active entries only.
    """

    def __init__(self, capacity: int = 512, embed_dim: int = 256, generation: int = 0) -> None:
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        if embed_dim < 1:
            raise ValueError(f"embed_dim must be >= 1, got {embed_dim}")
        if generation < 0:
            raise ValueError(f"generation must be >= 0, got {generation}")
        self._capacity = capacity
        self._embed_dim = embed_dim
        self._generation = generation
        self._entries: dict[str, MemoryEntry] = {}
        self._lock = threading.Lock()

    @classmethod
    def restore(
        cls,
        capacity: int,
        embed_dim: int,
        generation: int,
        entries: Iterable[MemoryEntry],
    ) -> "MemoryLibrary":
        """Rebuild a library from persisted state. Unlike apply_batch this does
        not advance the generation: loading is not an update operation."""
        lib = cls(capacity=capacity, embed_dim=embed_dim, generation=generation)
        with lib._lock:
            for entry in entries:
                if entry.entry_id in lib._entries:
                    raise ValueError(f"duplicate entry id: {entry.entry_id}")
                lib._validate_entry(entry)
                lib._entries[entry.entry_id] = entry
            active = sum(1 for e in lib._entries.values() if e.status is EntryStatus.ACTIVE)
            if active > capacity:
                raise ValueError(f"{active} active entries exceed capacity {capacity}")
        return lib

    @property
    def capacity(self) -> int:
        return self._capacity

    @property
    def embed_dim(self) -> int:
        return self._embed_dim

    @property
    def generation(self) -> int:
        with self._lock:
            return self._generation

    def get(self, entry_id: str) -> MemoryEntry | None:
        with self._lock:
            return self._entries.get(entry_id)

    def entries(self) -> tuple[MemoryEntry, ...]:
        """All entries (any status), ordered by entry_id."""
        with self._lock:
            return tuple(self._entries[k] for k in sorted(self._entries))

    def active_entries(self) -> tuple[MemoryEntry, ...]:
        return self.snapshot_active()[1]

    def active_count(self) -> int:
        with self._lock:
            return sum(1 for e in self._entries.values() if e.status is EntryStatus.ACTIVE)

    def snapshot_active(self) -> tuple[int, tuple[MemoryEntry, ...]]:
        """Atomically read (generation, Active entries ordered by entry_id)."""
        with self._lock:
            active = tuple(
                self._entries[k]
                for k in sorted(self._entries)
                if self._entries[k].status is EntryStatus.ACTIVE
            )
            return self._generation, active

    def _validate_entry(self, entry: MemoryEntry) -> None:
        for key in entry.keys:
            if len(key.vec) != self._embed_dim:
                raise ValueError(
                    f"entry {entry.entry_id} key dimension {len(key.vec)} != "
                    f"library embed_dim {self._embed_dim}"
                )

    def apply_batch(
        self,
        *,
        add: Sequence[MemoryEntry] = (),
        replace_entries: Sequence[MemoryEntry] = (),
        deprecate: Iterable[str] = (),
    ) -> int:
        """Commit one atomic batch; returns the new generation.

        ``add`` inserts new entries, ``replace_entries`` swaps existing ids in
        place, ``deprecate`` flips status. The Active count must respect
        capacity after the batch; callers evict first. Even an empty batch
        advances the generation: every update operation is one batch.
        """
        with self._lock:
            seen_new = set()
            for entry in add:
                if entry.entry_id in self._entries or entry.entry_id in seen_new:
                    raise ValueError(f"entry id already present: {entry.entry_id}")
                self._validate_entry(entry)
                seen_new.add(entry.entry_id)
            for entry in replace_entries:
                if entry.entry_id not in self._entries:
                    raise ValueError(f"cannot replace unknown entry: {entry.entry_id}")
                self._validate_entry(entry)
            deprecate_ids = list(deprecate)
            for entry_id in deprecate_ids:
                if entry_id not in self._entries and entry_id not in seen_new:
                    raise ValueError(f"cannot deprecate unknown entry: {entry_id}")

            staged = dict(self._entries)
            for entry in add:
                staged[entry.entry_id] = entry
            for entry in replace_entries:
                staged[entry.entry_id] = entry
            for entry_id in deprecate_ids:
                staged[entry_id] = replace(staged[entry_id], status=EntryStatus.DEPRECATED)

            active = sum(1 for e in staged.values() if e.status is EntryStatus.ACTIVE)
            if active > self._capacity:
                raise ValueError(
                    f"batch would leave {active} active entries, capacity is {self._capacity}"
                )
            self._entries = staged
            self._generation += 1
            return self._generation

    def note_retrieved(self, entry_ids: Iterable[str]) -> None:
        """Bump retrieved_count for each id. Not an update batch: no generation bump."""
        with self._lock:
            for entry_id in entry_ids:
                entry = self._entries.get(entry_id)
                if entry is None:
                    raise ValueError(f"cannot record retrieval for unknown entry: {entry_id}")
                stats = replace(entry.stats, retrieved_count=entry.stats.retrieved_count + 1)
                self._entries[entry_id] = replace(entry, stats=stats)
