"""Update strategies: grow, validate, or revise the library from execution feedback."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Protocol, Sequence

from .builder import REJECTED_OBS, BuildError, Builder
from .core import EntryStatus, MemoryEntry, MemoryLibrary, ProcmemError, Step, Trajectory

__all__ = [
    "ExecutionFeedback",
    "DeprecationRule",
    "UpdateKind",
    "UpdatePolicy",
    "Reviser",
    "RuleBasedReviser",
    "UpdateReport",
    "run_update",
    "run_update_batches",
    "deprecate_and_evict",
]


@dataclass(frozen=True)
class ExecutionFeedback:
    """What one executed task reported back to the memory engine."""

    task_id: str
    reward: float
    success: bool
    steps_used: int
    retrieved_entry_ids: tuple[str, ...] = ()
    trajectory: Trajectory | None = None


@dataclass(frozen=True)
class DeprecationRule:
    """Deprecate entries that were retrieved often but rarely helped."""

    min_retrievals: int = 5
    max_help_rate: float = 0.2

    def __post_init__(self) -> None:
        if self.min_retrievals < 1:
            raise ValueError(f"min_retrievals must be >= 1, got {self.min_retrievals}")
        if not 0.0 <= self.max_help_rate <= 1.0:
            raise ValueError(f"max_help_rate must be within [0, 1], got {self.max_help_rate}")

    def applies(self, entry: MemoryEntry) -> bool:
        return (
            entry.stats.retrieved_count >= self.min_retrievals
            and entry.help_rate() <= self.max_help_rate
        )


class UpdateKind(str, Enum):
    VANILLA = "vanilla"
    VALIDATED = "validated"
    ADJUST = "adjust"


class Reviser(Protocol):
    def revise(self, content: str, failing: Trajectory) -> str: ...


def _discovered_location(failing: Trajectory, rejection_obs: str) -> str | None:
    acquired_at = None
    for pos, step in enumerate(failing.steps):
        if step.observation.startswith("you take"):
            acquired_at = pos
            break
    if acquired_at is None:
        return None
    for step in reversed(failing.steps[:acquired_at]):
        if step.action.startswith("goto ") and step.observation != rejection_obs:
            return step.action.split(" ", 1)[1]
    return None


def _first_divergence(failing: Trajectory, rejection_obs: str) -> Step | None:
    for step in failing.steps:
        if step.observation == rejection_obs:
            return step
    return failing.steps[-1] if failing.steps else None


@dataclass(frozen=True)
class RuleBasedReviser:
    """Fixes a script's LOCATION from what the failing run actually found,
    and appends a PITFALL line for the first rejected step."""

    rejection_obs: str = REJECTED_OBS
    obs_truncate: int = 24

    def revise(self, content: str, failing: Trajectory) -> str:
        lines = content.split("\n")
        loc = _discovered_location(failing, self.rejection_obs)
        if loc is not None:
            for pos, line in enumerate(lines):
                if line.startswith("LOCATION "):
                    lines[pos] = f"LOCATION {loc}"
                    break
        pitfall = _first_divergence(failing, self.rejection_obs)
        if pitfall is not None:
            lines.append(
                f"PITFALL step={pitfall.index} action={pitfall.action} "
                f"obs={pitfall.observation[: self.obs_truncate]}"
            )
        return "\n".join(lines)


@dataclass(frozen=True)
class UpdatePolicy:
    kind: UpdateKind = UpdateKind.VALIDATED
    group_size: int = 20
    deprecation: DeprecationRule | None = field(default_factory=DeprecationRule)
    reviser: Reviser = field(default_factory=RuleBasedReviser)

    def __post_init__(self) -> None:
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")


@dataclass(frozen=True)
class UpdateReport:
    """Net effect of one update batch.

    The three id sets are disjoint: an entry both created and deprecated in
    the same batch reports as added; one both revised and deprecated reports
    as removed. ``skipped`` pairs a feedback reference with the reason it
    contributed nothing.
    """

    added: tuple[str, ...]
    removed: tuple[str, ...]
    updated: tuple[str, ...]
    skipped: tuple[tuple[str, str], ...]
    generation_before: int
    generation_after: int


def _maintenance(
    active: list[MemoryEntry], capacity: int, rule: DeprecationRule | None
) -> list[str]:
    """Ids to deprecate: rule hits first, then capacity evictions."""
    out: list[str] = []
    survivors = []
    for entry in active:
        if rule is not None and rule.applies(entry):
            out.append(entry.entry_id)
        else:
            survivors.append(entry)
    overflow = len(survivors) - capacity
    if overflow > 0:
        # Worst help rate goes first; older groups break ties, then entry_id.
        survivors.sort(key=lambda e: (e.help_rate(), e.provenance.created_group, e.entry_id))
        out.extend(e.entry_id for e in survivors[:overflow])
    return out


def run_update(
    library: MemoryLibrary,
    batch: Sequence[ExecutionFeedback],
    policy: UpdatePolicy,
    builder: Builder | None = None,
    group_index: int = 0,
) -> UpdateReport:
    """Apply one feedback batch as a single atomic library update.

    All strategies credit success_count/failure_count on the entries each
    feedback retrieved (unknown ids are ignored: the entry may predate an
    import or have been replaced). VANILLA builds an entry from every
    trajectory, VALIDATED only from successes, ADJUST builds from successes
    and revises the top-ranked retrieved entry of each failure. Maintenance
    (deprecation rule + capacity eviction) runs in the same batch, and the
    library generation advances exactly once, even for a no-op batch.
    """
    if builder is None and policy.kind is not UpdateKind.ADJUST:
        raise ValueError(f"{policy.kind.value} updates require a builder")
    if builder is None and any(f.success for f in batch):
        raise ValueError("adjust updates with successful feedback require a builder")

    generation_before = library.generation
    base = {e.entry_id: e for e in library.entries()}
    pending: dict[str, MemoryEntry] = {}

    def current(entry_id: str) -> MemoryEntry | None:
        return pending.get(entry_id) or base.get(entry_id)

    # Outcome accounting happens under every strategy.
    for feedback in batch:
        for entry_id in feedback.retrieved_entry_ids:
            entry = current(entry_id)
            if entry is None:
                continue
            if feedback.success:
                stats = replace(entry.stats, success_count=entry.stats.success_count + 1)
            else:
                stats = replace(entry.stats, failure_count=entry.stats.failure_count + 1)
            pending[entry_id] = replace(entry, stats=stats)

    adds: list[MemoryEntry] = []
    updated_ids: list[str] = []
    skipped: list[tuple[str, str]] = []

    def build_from(feedback: ExecutionFeedback) -> None:
        if feedback.trajectory is None:
            skipped.append((feedback.task_id, "no trajectory attached"))
            return
        try:
            adds.append(builder.build(feedback.trajectory, created_group=group_index))
        except BuildError as exc:
            skipped.append((feedback.task_id, str(exc)))

    for feedback in batch:
        if policy.kind is UpdateKind.VANILLA:
            build_from(feedback)
        elif policy.kind is UpdateKind.VALIDATED:
            if feedback.success:
                build_from(feedback)
        else:
            if feedback.success:
                build_from(feedback)
            elif feedback.retrieved_entry_ids:
                target_id = feedback.retrieved_entry_ids[0]
                target = current(target_id)
                if target is None:
                    skipped.append((feedback.task_id, f"entry {target_id} not found"))
                elif target.status is not EntryStatus.ACTIVE:
                    skipped.append((feedback.task_id, f"entry {target_id} is deprecated"))
                elif feedback.trajectory is None:
                    skipped.append((feedback.task_id, "no trajectory attached"))
                else:
                    try:
                        content = policy.reviser.revise(target.content, feedback.trajectory)
                    except (ProcmemError, ValueError) as exc:
                        skipped.append((feedback.task_id, f"reviser failed: {exc}"))
                    else:
                        stats = replace(target.stats, revision=target.stats.revision + 1)
                        pending[target_id] = replace(target, content=content, stats=stats)
                        updated_ids.append(target_id)

    projected_active = [
        pending.get(eid, entry)
        for eid, entry in base.items()
        if (pending.get(eid, entry)).status is EntryStatus.ACTIVE
    ]
    projected_active.extend(adds)
    deprecate_ids = _maintenance(projected_active, library.capacity, policy.deprecation)

    library.apply_batch(
        add=adds,
        replace_entries=list(pending.values()),
        deprecate=deprecate_ids,
    )

    added_set = {e.entry_id for e in adds}
    removed_set = {eid for eid in deprecate_ids if eid not in added_set}
    updated_set = {eid for eid in updated_ids if eid not in added_set and eid not in removed_set}
    return UpdateReport(
        added=tuple(sorted(added_set)),
        removed=tuple(sorted(removed_set)),
        updated=tuple(sorted(updated_set)),
        skipped=tuple(skipped),
        generation_before=generation_before,
        generation_after=library.generation,
    )


def run_update_batches(
    library: MemoryLibrary,
    feedbacks: Sequence[ExecutionFeedback],
    policy: UpdatePolicy,
    builder: Builder | None = None,
    start_group: int = 0,
) -> list[UpdateReport]:
    """Chunk feedback into groups of ``policy.group_size`` and update per group."""
    reports = []
    for offset in range(0, len(feedbacks), policy.group_size):
        chunk = feedbacks[offset : offset + policy.group_size]
        reports.append(
            run_update(
                library,
                chunk,
                policy,
                builder,
                group_index=start_group + offset // policy.group_size,
            )
        )
    return reports


def deprecate_and_evict(
    library: MemoryLibrary, rule: DeprecationRule | None = None
) -> UpdateReport:
    """Run maintenance alone as one batch. Idempotent in effect; the
    generation still advances because every update operation is a batch."""
    generation_before = library.generation
    rule = rule if rule is not None else DeprecationRule()
    active = list(library.active_entries())
    deprecate_ids = _maintenance(active, library.capacity, rule)
    library.apply_batch(deprecate=deprecate_ids)
    return UpdateReport(
        added=(),
        removed=tuple(sorted(deprecate_ids)),
        updated=(),
        skipped=(),
        generation_before=generation_before,
        generation_after=library.generation,
    )
