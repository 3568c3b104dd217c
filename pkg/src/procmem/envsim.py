"""KeyedRooms: a deterministic desk-scale text environment, plus scripted agents.

One episode: find a hidden object by visiting locations, take it, apply its
required procedure verbs in order, then finish. Every action costs one step
against a budget. The environment is exact and seedable, so episode step
counts are reproducible arithmetic rather than model behavior.
"""

from __future__ import annotations

import random
import re
from dataclasses import dataclass
from typing import Sequence

from .builder import REJECTED_OBS
from .core import ProcmemError, Step, TaskSpec, Trajectory, whitespace_token_count

__all__ = [
    "EnvError",
    "PROCEDURE_VOCAB",
    "ACTION_VOCAB",
    "REJECTED_OBS",
    "DESCRIPTION_TEMPLATES",
    "Family",
    "WorldConfig",
    "family_location",
    "scan_order",
    "spawn_tasks",
    "KeyedRooms",
    "AgentProfile",
    "EpisodeResult",
    "truncate_to_token_budget",
    "Hint",
    "parse_hints",
    "run_memory_free",
    "run_memory_informed",
    "default_world",
    "demo_world",
    "demo_task",
    "world_to_dict",
    "world_from_dict",
]


class EnvError(ProcmemError):
    """Environment misuse: acting on a finished episode, unknown family, etc."""


# Guessing agents try procedure verbs in this order; position is cost.
PROCEDURE_VOCAB = ("open", "heat", "cool", "clean", "slice", "place", "toggle")

ACTION_VOCAB = ("goto", "inspect", "take", "finish", "noop")

_LOC_RE = re.compile(r"^loc-([0-9]+)$")

# {verb} is always the first procedure verb, {obj} the target object.
DESCRIPTION_TEMPLATES = (
    "find the {obj} and {verb} it",
    "please {verb} the {obj} now",
    "go and {verb} the {obj}",
    "{verb} the {obj} in the house",
)


@dataclass(frozen=True)
class Family:
    """A task family: one object, its required verb sequence, its home location."""

    family_id: str
    obj: str
    procedure: tuple[str, ...]
    location: str

    def __post_init__(self) -> None:
        if not self.family_id or any(c.isspace() for c in self.family_id):
            raise ValueError(f"family_id must be a single token, got {self.family_id!r}")
        if not self.obj or any(c.isspace() for c in self.obj):
            raise ValueError(f"object must be a single token, got {self.obj!r}")
        if not 2 <= len(self.procedure) <= 5:
            raise ValueError(
                f"family {self.family_id} procedure length must be 2-5, got {len(self.procedure)}"
            )
        for verb in self.procedure:
            if verb not in PROCEDURE_VOCAB:
                raise ValueError(f"unknown procedure verb {verb!r} in family {self.family_id}")
        if not _LOC_RE.match(self.location):
            raise ValueError(f"location must look like loc-<n>, got {self.location!r}")


@dataclass(frozen=True)
class WorldConfig:
    world_id: str
    seed: int
    locations: tuple[str, ...]
    families: tuple[Family, ...]
    drift_prob: float = 0.0
    step_budget: int = 30

    def __post_init__(self) -> None:
        if len(self.locations) < 2:
            raise ValueError("world needs at least two locations")
        if self.step_budget < 1:
            raise ValueError(f"step_budget must be >= 1, got {self.step_budget}")
        seen = set()
        for loc in self.locations:
            if not _LOC_RE.match(loc):
                raise ValueError(f"location must look like loc-<n>, got {loc!r}")
            if loc in seen:
                raise ValueError(f"duplicate location {loc}")
            seen.add(loc)
        fids = set()
        for fam in self.families:
            if fam.family_id in fids:
                raise ValueError(f"duplicate family_id {fam.family_id}")
            fids.add(fam.family_id)
            if fam.location not in seen:
                raise ValueError(f"family {fam.family_id} placed at unknown {fam.location}")
        if not 0.0 <= self.drift_prob <= 1.0:
            raise ValueError(f"drift_prob must be within [0, 1], got {self.drift_prob}")

    def family(self, family_id: str) -> Family:
        for fam in self.families:
            if fam.family_id == family_id:
                return fam
        raise EnvError(f"unknown family {family_id!r} in world {self.world_id}")


def family_location(world: WorldConfig, family_id: str, group_index: int) -> str:
    """Where a family's object sits at a given group, after seeded drift.

    One transition per elapsed group: with probability drift_prob the object
    moves to a uniformly chosen other location. The stream depends only on
    (world seed, family_id), so location at group g is stable across calls.
    """
    if group_index < 0:
        raise ValueError(f"group_index must be >= 0, got {group_index}")
    fam = world.family(family_id)
    loc = fam.location
    rng = random.Random(f"{world.seed}:drift:{family_id}")
    for _ in range(group_index):
        if rng.random() < world.drift_prob:
            loc = rng.choice([c for c in world.locations if c != loc])
    return loc


def scan_order(world: WorldConfig) -> tuple[str, ...]:
    """loc-1 .. loc-N in numeric order, N = highest suffix the world names.

    Scanning agents walk this full range; gaps the world never named just
    waste a rejected goto plus an inspect, same cost as a real miss.
    """
    top = max(int(_LOC_RE.match(loc).group(1)) for loc in world.locations)
    return tuple(f"loc-{i}" for i in range(1, top + 1))


def spawn_tasks(
    world: WorldConfig,
    n: int,
    group_count: int = 1,
    id_prefix: str = "task",
    template: int | None = None,
) -> list[list[TaskSpec]]:
    """Deal n tasks round-robin over families, split into consecutive groups.

    Family and phrasing cycle by global task index, so the mix is uniform
    across groups: the phrasing advances once per full pass over the
    families. A fixed template pins every description to one phrasing. A
    task's group lands in its metadata and drives location drift.
    """
    if group_count < 1 or n < group_count:
        raise ValueError(f"need n >= group_count >= 1, got n={n}, group_count={group_count}")
    base, extra = divmod(n, group_count)
    fams = world.families
    groups: list[list[TaskSpec]] = []
    i = 0
    for g in range(group_count):
        group: list[TaskSpec] = []
        for _ in range(base + (1 if g < extra else 0)):
            fam = fams[i % len(fams)]
            t_idx = (
                template if template is not None else (i // len(fams)) % len(DESCRIPTION_TEMPLATES)
            )
            desc = DESCRIPTION_TEMPLATES[t_idx].format(obj=fam.obj, verb=fam.procedure[0])
            group.append(
                TaskSpec(
                    task_id=f"{id_prefix}-g{g}-{i:03d}",
                    description=desc,
                    family_id=fam.family_id,
                    env_id=world.world_id,
                    metadata={"stages": str(len(fam.procedure)), "group": str(g)},
                )
            )
            i += 1
        groups.append(group)
    return groups


class KeyedRooms:
    """One episode of the environment. Mutable; make a fresh one per run."""

    def __init__(
        self, world: WorldConfig, task: TaskSpec, budget: int | None = None, group_index: int = 0
    ) -> None:
        if budget is None:
            budget = world.step_budget
        if budget < 1:
            raise ValueError(f"budget must be >= 1, got {budget}")
        self.world = world
        self.task = task
        self.budget = budget
        fam = world.family(task.family_id)
        self._obj = fam.obj
        self._procedure = fam.procedure
        self._obj_location = family_location(world, task.family_id, group_index)
        self.steps_used = 0
        self.done = False
        self.finished_ok = False
        self._at: str | None = None
        self._acquired = False
        self._progress = 0

    def step(self, action: str) -> tuple[str, bool]:
        """Apply one action; returns (observation, done). Every call costs 1."""
        if self.done:
            raise EnvError("episode is over")
        self.steps_used += 1
        parts = action.split()
        obs = REJECTED_OBS
        if action == "finish":
            obs = "done"
            self.done = True
            self.finished_ok = self._acquired and self._progress == len(self._procedure)
        elif not parts:
            pass
        elif parts[0] == "goto" and len(parts) == 2 and parts[1] in self.world.locations:
            self._at = parts[1]
            obs = f"you are at {parts[1]}"
        elif action == "inspect":
            if self._at == self._obj_location and not self._acquired:
                obs = f"you see {self._obj}"
            else:
                obs = "nothing here"
        elif parts[0] == "take" and len(parts) == 2:
            if parts[1] == self._obj and self._at == self._obj_location and not self._acquired:
                self._acquired = True
                obs = f"you take the {self._obj}"
        elif len(parts) == 2 and parts[0] in PROCEDURE_VOCAB and parts[1] == self._obj:
            if (
                self._acquired
                and self._progress < len(self._procedure)
                and parts[0] == self._procedure[self._progress]
            ):
                self._progress += 1
                obs = f"you {parts[0]} the {self._obj}"
        if not self.done and self.steps_used >= self.budget:
            self.done = True
        return obs, self.done

    def reward(self) -> float:
        if not self.done:
            raise EnvError("reward is defined only after the episode ends")
        return 1.0 if self.finished_ok else 0.0


@dataclass(frozen=True)
class AgentProfile:
    """Scripted-agent knobs: slip rate and context budget in whitespace tokens."""

    p_err: float = 0.0
    context_budget: int | None = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_err < 1.0:
            raise ValueError(f"p_err must be within [0, 1), got {self.p_err}")
        if self.context_budget is not None and self.context_budget < 0:
            raise ValueError(f"context_budget must be >= 0, got {self.context_budget}")


@dataclass(frozen=True)
class EpisodeResult:
    trajectory: Trajectory
    context_tokens: int = 0

    @property
    def token_proxy(self) -> int:
        """Episode cost in tokens: provided context plus everything exchanged."""
        return self.context_tokens + self.trajectory.token_count


def truncate_to_token_budget(text: str, budget: int | None) -> str:
    """Keep the leading lines that fit in ``budget`` whitespace tokens.

    The line where the budget runs out keeps its leading tokens only;
    everything after is dropped. Tokens are never split.
    """
    if budget is None:
        return text
    kept: list[str] = []
    used = 0
    for line in text.split("\n"):
        toks = line.split()
        if used + len(toks) <= budget:
            kept.append(line)
            used += len(toks)
            continue
        room = budget - used
        if room > 0:
            kept.append(" ".join(toks[:room]))
        break
    return "\n".join(kept)


@dataclass(frozen=True)
class Hint:
    """What an agent can act on from one memory block: where to go, what to do."""

    location: str
    actions: tuple[str, ...]
    source: str


def _verbatim_hint(steps: list[tuple[str, str]]) -> Hint | None:
    take_pos = None
    for pos, (_, obs) in enumerate(steps):
        if obs.startswith("you take"):
            take_pos = pos
            break
    if take_pos is None:
        return None
    location = None
    for action, obs in reversed(steps[:take_pos]):
        if action.startswith("goto ") and obs != REJECTED_OBS:
            location = action.split(" ", 1)[1]
            break
    if not location or " " in location:
        return None
    verbs = []
    for action, obs in steps[take_pos + 1 :]:
        if obs == REJECTED_OBS:
            continue
        verb = action.split()[0]
        if verb in ("goto", "inspect", "take", "finish"):
            continue
        verbs.append(verb)
    if not verbs:
        return None
    return Hint(location=location, actions=tuple(verbs), source="verbatim")


def parse_hints(text: str) -> list[Hint]:
    """Extract actionable hints from (possibly truncated) memory content.

    Script blocks need a LOCATION line and a non-empty ACTIONS list. Verbatim
    blocks need the full TASK..REWARD span and must show the object being
    taken. Anything mangled by truncation yields no hint rather than a bad
    one. Hints come back in text order, which is retrieval rank order.
    """
    hints: list[Hint] = []
    lines = text.split("\n")
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("SCRIPT "):
            i += 1
            location = None
            actions: tuple[str, ...] = ()
            while i < len(lines) and not lines[i].startswith(("SCRIPT ", "TASK ")):
                body = lines[i]
                if body.startswith("LOCATION ") and location is None:
                    cand = body[9:].strip()
                    if cand and " " not in cand:
                        location = cand
                elif body.startswith("ACTIONS ") and not actions:
                    actions = tuple(a for a in body[8:].strip().split(",") if a)
                i += 1
            if location and actions:
                hints.append(Hint(location=location, actions=actions, source="script"))
        elif line.startswith("TASK "):
            i += 1
            steps: list[tuple[str, str]] = []
            complete = False
            clean = True
            while i < len(lines) and not lines[i].startswith(("SCRIPT ", "TASK ")):
                body = lines[i]
                i += 1
                if body.startswith("STEP "):
                    _, sep1, rest = body[5:].partition(" ACT ")
                    action, sep2, obs = rest.partition(" OBS ")
                    if sep1 and sep2 and action:
                        steps.append((action, obs))
                    else:
                        clean = False
                elif body.startswith("REWARD "):
                    complete = True
                    break
            if complete and clean and steps:
                hint = _verbatim_hint(steps)
                if hint is not None:
                    hints.append(hint)
        else:
            i += 1
    return hints


class _Recorder:
    """Binds an env to a step list so agents stay out of bookkeeping."""

    def __init__(self, env: KeyedRooms) -> None:
        self.env = env
        self.steps: list[Step] = []

    def act(self, action: str) -> str:
        obs, _ = self.env.step(action)
        self.steps.append(Step(index=len(self.steps), action=action, observation=obs))
        return obs

    @property
    def done(self) -> bool:
        return self.env.done

    def finish_trajectory(self, traj_id: str) -> Trajectory:
        if not self.env.done:
            self.act("finish")
        return Trajectory(
            traj_id=traj_id,
            task=self.env.task,
            steps=tuple(self.steps),
            reward=self.env.reward(),
        )


def _guess_stages(
    rec: _Recorder, obj: str, stages: int, rng: random.Random, p_err: float
) -> None:
    """Work through unknown stages by cycling the verb vocabulary.

    Before each attempt a p_err roll may insert one wasted noop; the intended
    attempt still follows. Rejections leave the env unchanged, so a fresh
    cycle per stage always lands on the required verb eventually.
    """
    for _ in range(stages):
        if rec.done:
            return
        for verb in PROCEDURE_VOCAB:
            if rec.done:
                return
            if p_err > 0.0 and rng.random() < p_err:
                rec.act("noop")
                if rec.done:
                    return
            obs = rec.act(f"{verb} {obj}")
            if obs != REJECTED_OBS:
                break


def _scan_for_object(rec: _Recorder, skip: set[str]) -> str | None:
    """goto+inspect down the location line until something is seen."""
    for loc in scan_order(rec.env.world):
        if loc in skip:
            continue
        if rec.done:
            return None
        rec.act(f"goto {loc}")
        if rec.done:
            return None
        obs = rec.act("inspect")
        if obs.startswith("you see "):
            return obs[len("you see ") :]
        if rec.done:
            return None
    return None


def run_memory_free(
    env: KeyedRooms,
    rng: random.Random,
    profile: AgentProfile = AgentProfile(),
    traj_id: str = "",
) -> EpisodeResult:
    """Baseline agent: scan every location, take, brute-force each stage."""
    rec = _Recorder(env)
    stages = int(env.task.metadata["stages"])
    obj = _scan_for_object(rec, skip=set())
    if obj is not None and not rec.done:
        rec.act(f"take {obj}")
        _guess_stages(rec, obj, stages, rng, profile.p_err)
    return EpisodeResult(trajectory=rec.finish_trajectory(traj_id), context_tokens=0)


def run_memory_informed(
    env: KeyedRooms,
    contents: Sequence[str],
    rng: random.Random,
    profile: AgentProfile = AgentProfile(),
    traj_id: str = "",
) -> EpisodeResult:
    """Agent that reads retrieved memory before acting.

    Hints are attempted in rank order. While the object is unfound: goto the
    hinted location, inspect, and on sighting it take it and execute that
    hint's actions. Once holding the object, later hints skip the travel and
    just try their actions. The agent knows the stage count from the task
    metadata, so it finishes as soon as every stage has been accepted; a
    rejected action abandons the hint, and a hint that runs dry short of the
    last stage is merely spent, not fatal. When every hint is spent the agent
    falls back to memory-free behavior: scan the locations it has not already
    tried, then brute-force whatever stages its accepted actions have not
    covered. The p_err slip applies only while guessing, never while
    following a hint.
    """
    text = truncate_to_token_budget("\n".join(contents), profile.context_budget)
    context_tokens = whitespace_token_count(text)
    hints = parse_hints(text)
    rec = _Recorder(env)
    stages = int(env.task.metadata["stages"])

    obj: str | None = None
    accepted = 0  # the agent's own count of accepted procedure actions
    finished_by_hint = False
    visited: set[str] = set()
    for hint in hints:
        if rec.done:
            break
        if obj is None:
            visited.add(hint.location)
            rec.act(f"goto {hint.location}")
            if rec.done:
                break
            obs = rec.act("inspect")
            if not obs.startswith("you see "):
                continue
            obj = obs[len("you see ") :]
            if rec.done:
                break
            rec.act(f"take {obj}")
        for verb in hint.actions:
            if rec.done:
                break
            obs = rec.act(f"{verb} {obj}")
            if obs == REJECTED_OBS:
                break
            accepted += 1
        if accepted == stages and not rec.done:
            rec.act("finish")
            finished_by_hint = True
            break

    if not finished_by_hint and not rec.done:
        if obj is None:
            obj = _scan_for_object(rec, skip=visited)
            if obj is not None and not rec.done:
                rec.act(f"take {obj}")
        if obj is not None and not rec.done:
            _guess_stages(rec, obj, stages - accepted, rng, profile.p_err)

    return EpisodeResult(
        trajectory=rec.finish_trajectory(traj_id), context_tokens=context_tokens
    )


_DEFAULT_OBJECTS = ("egg", "mug", "apple", "knife", "lamp", "towel", "pan", "book")
_DEFAULT_LENGTHS = (2, 2, 3, 3, 4, 4, 5, 5)


def _guess_cost(procedure: Sequence[str]) -> int:
    """Total attempts a guessing agent spends on this procedure (no slips)."""
    return sum(PROCEDURE_VOCAB.index(v) + 1 for v in procedure)


def default_world(seed: int, drift_prob: float = 0.0) -> WorldConfig:
    """Generate the stock eight-family world for a seed.

    Procedure lengths use a fixed multiset; verbs and locations are seeded.
    Families are paired heaviest-to-guess with farthest-to-reach, which keeps
    the two most expensive families out of reach of a scanning agent on a
    standard test budget while the cheapest stays comfortably inside it.
    """
    rng = random.Random(f"world:{seed}")
    lengths = list(_DEFAULT_LENGTHS)
    rng.shuffle(lengths)
    procedures = [tuple(rng.sample(PROCEDURE_VOCAB, n)) for n in lengths]
    loc_nums = sorted(rng.sample(range(1, 11), 8))
    locations = tuple(f"loc-{i}" for i in range(1, 11))

    by_weight = sorted(range(8), key=lambda i: (-_guess_cost(procedures[i]), i))
    far_first = sorted(loc_nums, reverse=True)
    placed: dict[int, str] = {}
    for rank, fam_idx in enumerate(by_weight):
        placed[fam_idx] = f"loc-{far_first[rank]}"

    families = tuple(
        Family(
            family_id=f"{procedures[i][0]}-{_DEFAULT_OBJECTS[i]}",
            obj=_DEFAULT_OBJECTS[i],
            procedure=procedures[i],
            location=placed[i],
        )
        for i in range(8)
    )
    return WorldConfig(
        world_id=f"keyedrooms-{seed}",
        seed=seed,
        locations=locations,
        families=families,
        drift_prob=drift_prob,
    )


def demo_world() -> WorldConfig:
    """Tiny fixed world for the walkthrough demo. No randomness anywhere."""
    family = Family(
        family_id="heat-egg",
        obj="egg",
        procedure=("open", "heat", "place"),
        location="loc-7",
    )
    return WorldConfig(
        world_id="keyedrooms-demo",
        seed=0,
        locations=tuple(f"loc-{i}" for i in range(1, 9)),
        families=(family,),
        drift_prob=0.0,
    )


def demo_task() -> TaskSpec:
    return TaskSpec(
        task_id="demo-task",
        description="heat the egg in the microwave",
        family_id="heat-egg",
        env_id="keyedrooms-demo",
        metadata={"stages": "3", "group": "0"},
    )


_WORLD_KEYS = frozenset(
    {"world_id", "seed", "locations", "families", "drift_prob", "step_budget"}
)


def world_to_dict(world: WorldConfig) -> dict:
    return {
        "world_id": world.world_id,
        "seed": world.seed,
        "locations": list(world.locations),
        "families": [
            {
                "family_id": f.family_id,
                "obj": f.obj,
                "procedure": list(f.procedure),
                "location": f.location,
            }
            for f in world.families
        ],
        "drift_prob": world.drift_prob,
        "step_budget": world.step_budget,
    }


def world_from_dict(data: dict) -> WorldConfig:
    """Build a world from a config mapping, e.g. a parsed JSON file.

    ``locations`` may be an int L, shorthand for loc-1 through loc-L.
    Unknown keys are rejected rather than ignored.
    """
    if not isinstance(data, dict):
        raise EnvError("world config must be a JSON object")
    unknown = sorted(set(data) - _WORLD_KEYS)
    if unknown:
        raise EnvError(f"unknown world config keys: {', '.join(unknown)}")
    for required in ("seed", "locations", "families"):
        if required not in data:
            raise EnvError(f"world config missing key: {required}")
    raw_locs = data["locations"]
    if isinstance(raw_locs, int):
        if raw_locs < 2:
            raise EnvError(f"locations count must be >= 2, got {raw_locs}")
        locations = tuple(f"loc-{i}" for i in range(1, raw_locs + 1))
    else:
        locations = tuple(str(x) for x in raw_locs)
    families = []
    for i, f in enumerate(data["families"]):
        try:
            families.append(
                Family(
                    family_id=str(f["family_id"]),
                    obj=str(f["obj"]),
                    procedure=tuple(str(v) for v in f["procedure"]),
                    location=str(f["location"]),
                )
            )
        except KeyError as exc:
            raise EnvError(f"family {i} missing key: {exc.args[0]}") from None
        except ValueError as exc:
            raise EnvError(f"family {i}: {exc}") from None
    try:
        return WorldConfig(
            world_id=str(data.get("world_id", f"keyedrooms-{data['seed']}")),
            seed=int(data["seed"]),
            locations=locations,
            families=tuple(families),
            drift_prob=float(data.get("drift_prob", 0.0)),
            step_budget=int(data.get("step_budget", 30)),
        )
    except ValueError as exc:
        raise EnvError(str(exc)) from None
