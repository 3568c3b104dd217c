"""Builders that turn finished trajectories into memory entries."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import requests

from .core import (
    EntryKind,
    MemoryEntry,
    MemoryKey,
    ProcmemError,
    Provenance,
    Trajectory,
    serialize_trajectory,
)

__all__ = [
    "BuildError",
    "REJECTED_OBS",
    "Abstractor",
    "RuleBasedAbstractor",
    "RemoteAbstractor",
    "Keyer",
    "Builder",
    "filter_gold",
    "PROCEDURALIZED_SEPARATOR",
]


class BuildError(ProcmemError):
    """A trajectory could not be turned into a memory entry."""


# The observation the environment returns for any no-op action.
REJECTED_OBS = "nothing happens"

PROCEDURALIZED_SEPARATOR = "---"

# An entry key is (text, embedding); builders delegate key construction.
Keyer = Callable[[str], tuple[MemoryKey, ...]]


def filter_gold(trajectories: Sequence[Trajectory], threshold: float = 1.0) -> list[Trajectory]:
    """Keep trajectories with reward >= threshold. Idempotent."""
    return [t for t in trajectories if t.reward >= threshold]


class Abstractor(Protocol):
    def script(self, traj: Trajectory) -> str: ...


class RuleBasedAbstractor:
    """Derives a script hint block from a trajectory without any model calls.

    The block is::

        SCRIPT family=<family_id>
        LOCATION <loc>
        ACTIONS <a1>,<a2>,...
        NOTE derived from <traj_id>

    LOCATION is the target of the last accepted goto before the object was
    acquired; ACTIONS records the leading verb of each accepted
    non-navigation action after acquisition, in order, with rejected
    attempts dropped. Verbs only: the executor re-binds them to whatever
    object it picked up, and the comma-joined list stays one token.
    """

    def __init__(self, rejection_obs: str = REJECTED_OBS) -> None:
        self.rejection_obs = rejection_obs

    def script(self, traj: Trajectory) -> str:
        steps = traj.steps
        acquired_at = None
        for pos, step in enumerate(steps):
            if step.observation.startswith("you take"):
                acquired_at = pos
                break
        if acquired_at is None:
            raise BuildError(f"trajectory {traj.traj_id or '<anonymous>'} never acquired the object")

        location = None
        for step in reversed(steps[:acquired_at]):
            if step.action.startswith("goto ") and step.observation != self.rejection_obs:
                location = step.action.split(" ", 1)[1]
                break
        if not location or " " in location:
            raise BuildError(
                f"trajectory {traj.traj_id or '<anonymous>'} has no usable location before acquisition"
            )

        actions: list[str] = []
        for step in steps[acquired_at + 1 :]:
            if step.observation == self.rejection_obs:
                continue
            verb = step.action.split()[0]
            if verb in ("goto", "inspect", "take", "finish"):
                continue
            if "," in verb:
                raise BuildError(f"procedure verb may not contain a comma: {verb!r}")
            actions.append(verb)
        if not actions:
            raise BuildError(
                f"trajectory {traj.traj_id or '<anonymous>'} has no accepted procedure actions"
            )

        traj_ref = traj.traj_id or "unknown"
        if any(c.isspace() for c in traj_ref):
            raise BuildError(f"traj_id must be a single token, got {traj_ref!r}")
        return "\n".join(
            [
                f"SCRIPT family={traj.task.family_id}",
                f"LOCATION {location}",
                f"ACTIONS {','.join(actions)}",
                f"NOTE derived from {traj_ref}",
            ]
        )


class RemoteAbstractor:
    """HTTP abstraction backend: POST {"trajectory": <canonical text>, "mode": "script"}.

    The response must be {"content": "<script block>"}. Failures raise
    :class:`BuildError`.
    """

    def __init__(
        self,
        url: str,
        timeout: float = 30.0,
        session: requests.Session | None = None,
    ) -> None:
        self._url = url
        self._timeout = timeout
        self._session = session or requests.Session()

    def script(self, traj: Trajectory) -> str:
        try:
            resp = self._session.post(
                self._url,
                json={"trajectory": serialize_trajectory(traj), "mode": "script"},
                timeout=self._timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except ValueError as exc:
            # JSONDecodeError subclasses RequestException too; order matters.
            raise BuildError(f"abstractor returned invalid JSON: {exc}") from exc
        except requests.RequestException as exc:
            raise BuildError(f"abstractor request failed: {exc}") from exc
        content = payload.get("content") if isinstance(payload, dict) else None
        if not isinstance(content, str) or not content.strip():
            raise BuildError("abstractor returned no content")
        return content


@dataclass(frozen=True)
class _BuilderConfig:
    kind: EntryKind
    gold_threshold: float


class Builder:
    """Builds memory entries of one kind, assigning monotone entry ids.

    ``gold_threshold`` is advisory: it records the reward bar the caller
    intends for script-bearing entries, but the builder does not reject
    low-reward trajectories itself -- update strategies decide what to build
    (Vanilla deliberately builds from failures). Offline pipelines apply
    :func:`filter_gold` first.
    """

    def __init__(
        self,
        kind: EntryKind,
        keyer: Keyer,
        abstractor: Abstractor | None = None,
        origin_agent: str = "local",
        id_prefix: str | None = None,
        gold_threshold: float = 1.0,
    ) -> None:
        if kind in (EntryKind.SCRIPT, EntryKind.PROCEDURALIZED) and abstractor is None:
            raise ValueError(f"{kind.value} builder requires an abstractor")
        if not origin_agent or any(c.isspace() for c in origin_agent):
            raise ValueError(f"origin_agent must be a single token, got {origin_agent!r}")
        self._config = _BuilderConfig(kind=kind, gold_threshold=gold_threshold)
        self._keyer = keyer
        self._abstractor = abstractor
        self._origin = origin_agent
        self._prefix = id_prefix if id_prefix is not None else origin_agent
        self._counter = 0
        self._lock = threading.Lock()

    @property
    def kind(self) -> EntryKind:
        return self._config.kind

    @property
    def gold_threshold(self) -> float:
        return self._config.gold_threshold

    def _next_id(self) -> str:
        with self._lock:
            value = self._counter
            self._counter += 1
        return f"{self._prefix}-{value:06d}"

    def build(self, traj: Trajectory, created_group: int = 0) -> MemoryEntry:
        """Build one entry; raises :class:`BuildError` when abstraction fails."""
        kind = self._config.kind
        if kind is EntryKind.VERBATIM:
            content = serialize_trajectory(traj)
        elif kind is EntryKind.SCRIPT:
            content = self._abstractor.script(traj)
        else:
            script = self._abstractor.script(traj)
            content = f"{script}\n{PROCEDURALIZED_SEPARATOR}\n{serialize_trajectory(traj)}"
        keys = tuple(self._keyer(traj.task.description))
        if not keys:
            raise BuildError(f"keyer produced no keys for task {traj.task.task_id!r}")
        return MemoryEntry(
            entry_id=self._next_id(),
            kind=kind,
            content=content,
            keys=keys,
            provenance=Provenance(
                source_traj_ids=(traj.traj_id,) if traj.traj_id else (),
                builder_policy=kind.value,
                origin_agent=self._origin,
                created_group=created_group,
            ),
        )
