"""Benchmark harness: experiment specs, runners, and deterministic outputs.

An experiment is described by an :class:`ExperimentSpec` (JSON-serializable,
unknown keys rejected) that carries its own pass/fail assertions. Runners are
pure functions from spec to rows; all randomness flows through named seed
strings, so a rerun with the same spec produces byte-identical metrics.csv
and raw.jsonl files.
"""

from __future__ import annotations

import csv
import json
import random
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .builder import Builder, RuleBasedAbstractor, filter_gold
from .core import (
    EntryKind,
    MemoryEntry,
    MemoryKey,
    MemoryLibrary,
    ProcmemError,
    Provenance,
    TaskSpec,
    Trajectory,
)
from .embedding import Embedder, LocalEmbedder
from .envsim import (
    PROCEDURE_VOCAB,
    AgentProfile,
    Family,
    KeyedRooms,
    WorldConfig,
    default_world,
    run_memory_free,
    run_memory_informed,
    spawn_tasks,
    world_from_dict,
)
from .retriever import (
    KeyKind,
    KeyPolicy,
    RetrieveKind,
    RetrievePolicy,
    keyer_for,
    make_keys,
    retrieve,
)
from .store import export_store, import_store
from .updater import (
    ExecutionFeedback,
    RuleBasedReviser,
    UpdateKind,
    UpdatePolicy,
    run_update,
)

__all__ = [
    "BenchError",
    "EXPERIMENTS",
    "METRICS_COLUMNS",
    "ExperimentSpec",
    "MetricsRow",
    "AssertionResult",
    "BenchResult",
    "spec_from_dict",
    "spec_to_dict",
    "load_spec",
    "default_spec",
    "run_experiment",
    "evaluate_assertions",
    "write_metrics_csv",
    "write_raw_jsonl",
    "write_plot_data",
    "run_spec",
]


class BenchError(ProcmemError):
    """Bad experiment spec, clobbered output, or a failed embedded assertion."""


EXPERIMENTS = (
    "build_comparison",
    "retrieval_comparison",
    "update_curves",
    "transfer",
    "k_scaling",
)

METRICS_COLUMNS = [
    "experiment",
    "group_index",
    "policy",
    "success_rate",
    "mean_steps",
    "mean_token_proxy",
    "library_size",
    "seed",
]


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce one experiment, assertions included.

    ``world`` is either the literal string "default" (a fresh generated world
    per seed) or a path to a world config JSON file (the same world for every
    seed; seeds then only steer agent randomness). ``k_scaling`` ignores it
    and builds its own fixed world.
    """

    name: str
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    world: str = "default"
    n_tasks: int = 40
    group_count: int = 1
    k_sweep: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    p_err: float = 0.0
    weak_p_err: float = 0.3
    context_budget: int | None = 120
    drift_prob: float = 0.0
    group_size: int = 20
    train_budget: int = 60
    capacity: int = 512
    retrieve_k: int = 1
    out_dir: str = "bench-out"
    assertions: tuple[Mapping, ...] = ()

    def __post_init__(self) -> None:
        if self.name not in EXPERIMENTS:
            raise BenchError(f"unknown experiment {self.name!r} (one of {', '.join(EXPERIMENTS)})")
        if not self.seeds:
            raise BenchError("spec needs at least one seed")
        if not self.k_sweep or any(k < 1 for k in self.k_sweep):
            raise BenchError("k_sweep must be non-empty with every k >= 1")
        if self.group_count < 1 or self.n_tasks < self.group_count:
            raise BenchError(
                f"need n_tasks >= group_count >= 1, got {self.n_tasks} and {self.group_count}"
            )
        if not 0.0 <= self.p_err < 1.0 or not 0.0 <= self.weak_p_err < 1.0:
            raise BenchError("error rates must be in [0, 1)")
        if self.group_size < 1 or self.capacity < 1 or self.retrieve_k < 1:
            raise BenchError("group_size, capacity, and retrieve_k must be >= 1")
        for i, a in enumerate(self.assertions):
            _validate_assertion(a, i)


_SPEC_FIELDS = tuple(ExperimentSpec.__dataclass_fields__)

_ASSERT_METRICS = ("success_rate", "mean_steps", "mean_token_proxy", "library_size")
_COMPARE_OPS = (">=", ">", "<=")
_ASSERT_KEYS = {
    "compare": frozenset({"type", "label", "metric", "left", "right", "op", "margin"}),
    "non_decreasing": frozenset({"type", "label", "metric", "policy"}),
}


def _validate_assertion(a: Mapping, index: int) -> None:
    """Reject malformed embedded assertions up front, naming the field."""
    where = f"assertion {index}"
    if not isinstance(a, Mapping):
        raise BenchError(f"{where}: must be a JSON object")
    kind = a.get("type")
    if kind not in _ASSERT_KEYS:
        raise BenchError(f"{where}: type must be one of {tuple(_ASSERT_KEYS)}, got {kind!r}")
    unknown = sorted(set(a) - _ASSERT_KEYS[kind])
    if unknown:
        raise BenchError(f"{where}: unknown keys: {', '.join(unknown)}")
    if a.get("metric") not in _ASSERT_METRICS:
        raise BenchError(f"{where}: metric must be one of {_ASSERT_METRICS}")
    if kind == "compare":
        if a.get("op") not in _COMPARE_OPS:
            raise BenchError(f"{where}: op must be one of {_COMPARE_OPS}, got {a.get('op')!r}")
        for side in ("left", "right"):
            sel = a.get(side)
            if not isinstance(sel, Mapping) or "policy" not in sel:
                raise BenchError(f"{where}: {side} must be an object with a 'policy'")
            bad = sorted(set(sel) - {"policy", "group_index"})
            if bad:
                raise BenchError(f"{where}: {side} has unknown selector keys: {', '.join(bad)}")
        if "margin" in a:
            try:
                float(a["margin"])
            except (TypeError, ValueError):
                raise BenchError(f"{where}: margin must be a number") from None
    else:
        if not isinstance(a.get("policy"), str):
            raise BenchError(f"{where}: non_decreasing needs a 'policy' string")


def spec_to_dict(spec: ExperimentSpec) -> dict:
    data = asdict(spec)
    data["seeds"] = list(spec.seeds)
    data["k_sweep"] = list(spec.k_sweep)
    data["assertions"] = [dict(a) for a in spec.assertions]
    return data


def spec_from_dict(data: Mapping) -> ExperimentSpec:
    if not isinstance(data, Mapping):
        raise BenchError("experiment spec must be a JSON object")
    unknown = sorted(set(data) - set(_SPEC_FIELDS))
    if unknown:
        raise BenchError(f"unknown spec keys: {', '.join(unknown)}")
    if "name" not in data:
        raise BenchError("experiment spec missing key: name")
    kwargs = dict(data)
    for key in ("seeds", "k_sweep"):
        if key in kwargs:
            kwargs[key] = tuple(int(x) for x in kwargs[key])
    if "assertions" in kwargs:
        kwargs["assertions"] = tuple(dict(a) for a in kwargs["assertions"])
    return ExperimentSpec(**kwargs)


def load_spec(path: str) -> ExperimentSpec:
    """Read a spec JSON file, or materialize a built-in via "default:<name>"."""
    if path.startswith("default:"):
        return default_spec(path[len("default:") :])
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BenchError(f"no spec file at {path}") from None
    except json.JSONDecodeError as exc:
        raise BenchError(f"spec file {path} is not valid JSON: {exc}") from None
    return spec_from_dict(data)


@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    group_index: int
    policy: str
    success_rate: float
    mean_steps: float
    mean_token_proxy: float
    library_size: int
    seed: int


@dataclass(frozen=True)
class AssertionResult:
    label: str
    passed: bool
    detail: str


@dataclass(frozen=True)
class BenchResult:
    spec: ExperimentSpec
    rows: tuple[MetricsRow, ...]
    raw: tuple[Mapping, ...]
    assertion_results: tuple[AssertionResult, ...]
    derived: Mapping = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(a.passed for a in self.assertion_results)


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


_CURVE_OBJECTS = ("egg", "mug", "apple", "knife", "lamp", "towel", "pan", "book")


def _uniform_slack_world(seed: int, drift_prob: float) -> WorldConfig:
    """World where every family is solvable from scratch, barely.

    Each family's deterministic solve cost is placed a few steps under the
    budget, so guess-slip noise causes real cold failures everywhere but a
    retrieved hint makes any family safe. Improvement curves then measure the
    memory lifecycle, not a fixed set of unreachable families (the default
    world keeps some families out of reach on purpose, which would let
    failure-built entries alone decide the comparison).
    """
    rng = random.Random(f"curve-world:{seed}")
    families = []
    for obj in _CURVE_OBJECTS:
        verbs = tuple(rng.sample(PROCEDURE_VOCAB, 3))
        guess_cost = sum(PROCEDURE_VOCAB.index(v) + 1 for v in verbs)
        # cold cost 2p + guess_cost + 2 lands near 28 of the 30-step budget
        suffix = max(1, min(10, round((28 - 1.3 * guess_cost) / 2)))
        families.append(Family(f"{verbs[0]}-{obj}", obj, verbs, f"loc-{suffix}"))
    return WorldConfig(
        world_id=f"keyedrooms-curve-{seed}",
        seed=seed,
        locations=tuple(f"loc-{i}" for i in range(1, 11)),
        families=tuple(families),
        drift_prob=drift_prob,
    )


def _world_for(spec: ExperimentSpec, seed: int) -> WorldConfig:
    if spec.world == "default":
        return default_world(seed, drift_prob=spec.drift_prob)
    if spec.world == "uniform_slack":
        return _uniform_slack_world(seed, drift_prob=spec.drift_prob)
    try:
        data = json.loads(Path(spec.world).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BenchError(
            f"world {spec.world!r} is neither a built-in name (default, uniform_slack) nor a readable file"
        ) from None
    return world_from_dict(data)


def _raw_record(
    spec: ExperimentSpec,
    seed: int,
    policy: str,
    group_index: int,
    task: TaskSpec,
    reward: float,
    steps: int,
    token_proxy: int,
    **extra,
) -> dict:
    rec = {
        "experiment": spec.name,
        "seed": seed,
        "policy": policy,
        "group_index": group_index,
        "task_id": task.task_id,
        "family_id": task.family_id,
        "reward": float(reward),
        "steps": int(steps),
        "token_proxy": int(token_proxy),
    }
    rec.update(extra)
    return rec


def _row_from_records(
    spec: ExperimentSpec,
    seed: int,
    policy: str,
    group_index: int,
    records: Sequence[Mapping],
    library_size: int,
) -> MetricsRow:
    return MetricsRow(
        experiment=spec.name,
        group_index=group_index,
        policy=policy,
        success_rate=_mean([1.0 if r["reward"] >= 1.0 else 0.0 for r in records]),
        mean_steps=_mean([float(r["steps"]) for r in records]),
        mean_token_proxy=_mean([float(r["token_proxy"]) for r in records]),
        library_size=library_size,
        seed=seed,
    )


def _train_trajectories(
    world: WorldConfig, n: int, budget: int, seed: int, tag: str
) -> list[Trajectory]:
    """Memory-free training runs at a generous budget; p_err 0 so they're gold."""
    tasks = spawn_tasks(world, n, 1, id_prefix=f"{tag}-train")[0]
    out = []
    for i, task in enumerate(tasks):
        env = KeyedRooms(world, task, budget=budget)
        res = run_memory_free(
            env,
            random.Random(f"{tag}:train:{seed}:{i}"),
            AgentProfile(),
            traj_id=f"{tag}-tr-{seed}-{i:03d}",
        )
        out.append(res.trajectory)
    return out


def _build_library(
    trajs: Sequence[Trajectory],
    kind: EntryKind,
    embedder: Embedder,
    spec: ExperimentSpec,
    agent: str,
    keyer: Callable[[str], tuple[MemoryKey, ...]] | None = None,
) -> tuple[MemoryLibrary, dict[str, str]]:
    """Build one entry per gold trajectory; returns the library and an
    entry_id -> family_id map for precision scoring."""
    lib = MemoryLibrary(capacity=spec.capacity, embed_dim=embedder.dim)
    builder = Builder(
        kind,
        keyer if keyer is not None else keyer_for(KeyPolicy(KeyKind.QUERY), embedder),
        abstractor=RuleBasedAbstractor(),
        origin_agent=agent,
        id_prefix=agent,
    )
    entries = []
    families: dict[str, str] = {}
    for traj in filter_gold(trajs):
        entry = builder.build(traj)
        entries.append(entry)
        families[entry.entry_id] = traj.task.family_id
    lib.apply_batch(add=entries)
    return lib, families


def run_build_comparison(spec: ExperimentSpec) -> tuple[list[MetricsRow], list[dict]]:
    """Same test tasks under no memory and under each entry kind."""
    embedder = LocalEmbedder()
    rows: list[MetricsRow] = []
    raw: list[dict] = []
    arms = (
        ("no_memory", None),
        ("verbatim", EntryKind.VERBATIM),
        ("script", EntryKind.SCRIPT),
        ("proceduralized", EntryKind.PROCEDURALIZED),
    )
    for seed in spec.seeds:
        world = _world_for(spec, seed)
        trajs = _train_trajectories(world, spec.n_tasks, spec.train_budget, seed, f"bc{seed}")
        test = spawn_tasks(world, spec.n_tasks, 1, id_prefix=f"bc{seed}-test")[0]
        for policy, kind in arms:
            if kind is None:
                lib = None
            else:
                lib, _ = _build_library(trajs, kind, embedder, spec, f"bc{seed}-{policy[:4]}")
            records = []
            for task in test:
                rng = random.Random(f"bc:{seed}:{task.task_id}")
                env = KeyedRooms(world, task)
                if lib is None:
                    res = run_memory_free(
                        env, rng, AgentProfile(p_err=spec.p_err), traj_id=f"{policy}-{task.task_id}"
                    )
                    retrieved: tuple[str, ...] = ()
                else:
                    rr = retrieve(
                        lib,
                        task,
                        RetrievePolicy(RetrieveKind.BY_KEY, k=spec.retrieve_k),
                        embedder,
                    )
                    retrieved = rr.entry_ids
                    res = run_memory_informed(
                        env,
                        list(rr.contents),
                        rng,
                        AgentProfile(p_err=spec.p_err, context_budget=spec.context_budget),
                        traj_id=f"{policy}-{task.task_id}",
                    )
                records.append(
                    _raw_record(
                        spec,
                        seed,
                        policy,
                        0,
                        task,
                        res.trajectory.reward,
                        res.trajectory.step_count,
                        res.token_proxy,
                        retrieved_entry_ids=list(retrieved),
                    )
                )
            raw.extend(records)
            rows.append(
                _row_from_records(
                    spec, seed, policy, 0, records, lib.active_count() if lib else 0
                )
            )
    return rows, raw


def _combined_keyer(embedder: Embedder, max_keywords: int = 5):
    """Query key first, keyword keys after it. Used for the key-policy
    comparison so one library serves both scoring modes."""

    def keyer(text: str) -> tuple[MemoryKey, ...]:
        query = make_keys(text, KeyPolicy(KeyKind.QUERY), embedder).keys
        facts = make_keys(text, KeyPolicy(KeyKind.AVEFACT, max_keywords=max_keywords), embedder)
        if facts.fell_back_to_query:
            return query
        return query + facts.keys

    return keyer


def run_retrieval_comparison(spec: ExperimentSpec) -> tuple[list[MetricsRow], list[dict]]:
    """Top-1 family precision for query, avefact, and random retrieval."""
    embedder = LocalEmbedder()
    rows: list[MetricsRow] = []
    raw: list[dict] = []
    policies = (
        ("query", RetrievePolicy(RetrieveKind.BY_KEY, k=1, key_policy=KeyPolicy(KeyKind.QUERY))),
        ("avefact", RetrievePolicy(RetrieveKind.BY_KEY, k=1, key_policy=KeyPolicy(KeyKind.AVEFACT))),
        ("random", None),
    )
    for seed in spec.seeds:
        world = _world_for(spec, seed)
        trajs = _train_trajectories(world, spec.n_tasks, spec.train_budget, seed, f"rc{seed}")
        lib, families = _build_library(
            trajs,
            EntryKind.SCRIPT,
            embedder,
            spec,
            f"rc{seed}",
            keyer=_combined_keyer(embedder),
        )
        test = spawn_tasks(world, spec.n_tasks, 1, id_prefix=f"rc{seed}-test")[0]
        for label, policy in policies:
            if policy is None:
                policy = RetrievePolicy(RetrieveKind.RANDOM, k=1, seed=seed)
            records = []
            for task in test:
                rr = retrieve(lib, task, policy, embedder)
                top = rr.entry_ids[0] if rr.entry_ids else ""
                hit = 1.0 if top and families.get(top) == task.family_id else 0.0
                records.append(
                    _raw_record(
                        spec,
                        seed,
                        label,
                        0,
                        task,
                        hit,
                        0,
                        0,
                        top1_entry_id=top,
                        top1_family=families.get(top, ""),
                    )
                )
            raw.extend(records)
            rows.append(_row_from_records(spec, seed, label, 0, records, lib.active_count()))
    return rows, raw


def run_update_curves(spec: ExperimentSpec) -> tuple[list[MetricsRow], list[dict], dict]:
    """Success over task groups for each update strategy, from a cold start.

    Group 0 is identical across strategies by construction: every library
    starts empty and the per-task rng streams do not mention the strategy.
    """
    embedder = LocalEmbedder()
    rows: list[MetricsRow] = []
    raw: list[dict] = []
    strategies = (UpdateKind.VANILLA, UpdateKind.VALIDATED, UpdateKind.ADJUST)
    for seed in spec.seeds:
        world = _world_for(spec, seed)
        groups = spawn_tasks(world, spec.n_tasks, spec.group_count, id_prefix=f"uc{seed}")
        for strategy in strategies:
            lib = MemoryLibrary(capacity=spec.capacity, embed_dim=embedder.dim)
            builder = Builder(
                EntryKind.SCRIPT,
                keyer_for(KeyPolicy(KeyKind.QUERY), embedder),
                abstractor=RuleBasedAbstractor(),
                origin_agent=f"uc{seed}-{strategy.value}",
                id_prefix=f"uc{seed}-{strategy.value[:3]}",
            )
            policy = UpdatePolicy(
                kind=strategy, group_size=spec.group_size, reviser=RuleBasedReviser()
            )
            for g, group in enumerate(groups):
                records = []
                feedback = []
                for j, task in enumerate(group):
                    rr = retrieve(
                        lib,
                        task,
                        RetrievePolicy(RetrieveKind.BY_KEY, k=spec.retrieve_k),
                        embedder,
                    )
                    rng = random.Random(f"uc:{seed}:g{g}:t{j}")
                    env = KeyedRooms(world, task, group_index=g)
                    res = run_memory_informed(
                        env,
                        list(rr.contents),
                        rng,
                        AgentProfile(p_err=spec.p_err, context_budget=spec.context_budget),
                        traj_id=f"uc-{seed}-g{g}-{j:02d}",
                    )
                    reward = res.trajectory.reward
                    feedback.append(
                        ExecutionFeedback(
                            task_id=task.task_id,
                            reward=reward,
                            success=reward >= 1.0,
                            steps_used=res.trajectory.step_count,
                            retrieved_entry_ids=rr.entry_ids,
                            trajectory=res.trajectory,
                        )
                    )
                    records.append(
                        _raw_record(
                            spec,
                            seed,
                            strategy.value,
                            g,
                            task,
                            reward,
                            res.trajectory.step_count,
                            res.token_proxy,
                            retrieved_entry_ids=list(rr.entry_ids),
                        )
                    )
                run_update(lib, feedback, policy, builder=builder, group_index=g)
                raw.extend(records)
                rows.append(
                    _row_from_records(spec, seed, strategy.value, g, records, lib.active_count())
                )
    deltas: dict[str, dict[str, float]] = {}
    for strategy in strategies:
        per_group: dict[int, list[float]] = {}
        for row in rows:
            if row.policy == strategy.value:
                per_group.setdefault(row.group_index, []).append(row.success_rate)
        first = _mean(per_group.get(0, []))
        deltas[strategy.value] = {
            str(g): round(_mean(vals) - first, 9) for g, vals in sorted(per_group.items())
        }
    return rows, raw, {"success_delta_vs_first_group": deltas}


def run_transfer(spec: ExperimentSpec) -> tuple[list[MetricsRow], list[dict]]:
    """Strong agent's exported memory dropped into a weak agent, via real files."""
    embedder = LocalEmbedder()
    rows: list[MetricsRow] = []
    raw: list[dict] = []
    for seed in spec.seeds:
        world = _world_for(spec, seed)
        trajs = _train_trajectories(world, spec.n_tasks, spec.train_budget, seed, f"tx{seed}")
        strong_lib, _ = _build_library(trajs, EntryKind.SCRIPT, embedder, spec, f"strong{seed}")
        weak_lib = MemoryLibrary(capacity=spec.capacity, embed_dim=embedder.dim)
        with tempfile.TemporaryDirectory() as tmp:
            handoff = Path(tmp) / f"strong-{seed}.jsonl"
            export_store(strong_lib, handoff)
            import_store(handoff, weak_lib)
        test = spawn_tasks(world, spec.n_tasks, 1, id_prefix=f"tx{seed}-test")[0]
        for policy in ("weak_alone", "weak_with_memory"):
            records = []
            for task in test:
                rng = random.Random(f"tx:{seed}:{task.task_id}")
                env = KeyedRooms(world, task)
                if policy == "weak_alone":
                    res = run_memory_free(
                        env, rng, AgentProfile(p_err=spec.weak_p_err), traj_id=f"{policy}-{task.task_id}"
                    )
                else:
                    rr = retrieve(
                        weak_lib,
                        task,
                        RetrievePolicy(RetrieveKind.BY_KEY, k=spec.retrieve_k),
                        embedder,
                    )
                    res = run_memory_informed(
                        env,
                        list(rr.contents),
                        rng,
                        AgentProfile(p_err=spec.weak_p_err, context_budget=spec.context_budget),
                        traj_id=f"{policy}-{task.task_id}",
                    )
                records.append(
                    _raw_record(
                        spec,
                        seed,
                        policy,
                        0,
                        task,
                        res.trajectory.reward,
                        res.trajectory.step_count,
                        res.token_proxy,
                    )
                )
            raw.extend(records)
            size = 0 if policy == "weak_alone" else weak_lib.active_count()
            rows.append(_row_from_records(spec, seed, policy, 0, records, size))
    return rows, raw


_KS_HEAVY = ("cool", "clean", "slice", "place", "toggle")
_KS_LIGHT = ("open", "slice")
_KS_DECOY_LOC = "loc-10"


def _k_scaling_world() -> WorldConfig:
    """Fixed world whose families separate the retrieval-count regimes.

    One family is solved by its top hint; four need a deep procedure and sit
    far away, so only a direct hit works; three hide behind long runs of
    plausible-but-wrong entries, so they reward wide retrieval until the
    context budget truncates the list.
    """
    families = (
        Family("open-egg", "egg", _KS_LIGHT, "loc-3"),
        Family("cool-mug", "mug", _KS_HEAVY, "loc-9"),
        Family("cool-apple", "apple", _KS_HEAVY, "loc-9"),
        Family("cool-knife", "knife", _KS_HEAVY, "loc-9"),
        Family("cool-lamp", "lamp", _KS_HEAVY, "loc-9"),
        Family("open-towel", "towel", _KS_LIGHT, "loc-7"),
        Family("open-pan", "pan", _KS_LIGHT, "loc-7"),
        Family("open-book", "book", _KS_LIGHT, "loc-7"),
    )
    return WorldConfig(
        world_id="keyedrooms-kscale",
        seed=0,
        locations=tuple(f"loc-{i}" for i in range(1, 11)),
        families=families,
        drift_prob=0.0,
        step_budget=40,
    )


# How many same-key decoys rank above each family's true entry.
_KS_DECOYS = {
    "open-egg": 0,
    "cool-mug": 1,
    "cool-apple": 2,
    "cool-knife": 3,
    "cool-lamp": 5,
    "open-towel": 12,
    "open-pan": 13,
    "open-book": 14,
}


def _k_scaling_library(world: WorldConfig, embedder: Embedder, capacity: int) -> MemoryLibrary:
    lib = MemoryLibrary(capacity=capacity, embed_dim=embedder.dim)
    entries = []
    for fam in world.families:
        desc = f"find the {fam.obj} and {fam.procedure[0]} it"
        key = MemoryKey(desc, embedder.embed(desc))
        for i in range(_KS_DECOYS[fam.family_id]):
            entries.append(
                MemoryEntry(
                    entry_id=f"d-{fam.family_id}-{i:03d}",
                    kind=EntryKind.SCRIPT,
                    content=(
                        f"SCRIPT family={fam.family_id}\n"
                        f"LOCATION {_KS_DECOY_LOC}\n"
                        "ACTIONS open\n"
                        f"NOTE derived from salt-{i:03d}"
                    ),
                    keys=(key,),
                    provenance=Provenance((f"salt-{i:03d}",), "salted", "bench"),
                )
            )
        entries.append(
            MemoryEntry(
                entry_id=f"t-{fam.family_id}",
                kind=EntryKind.SCRIPT,
                content=(
                    f"SCRIPT family={fam.family_id}\n"
                    f"LOCATION {fam.location}\n"
                    f"ACTIONS {','.join(fam.procedure)}\n"
                    f"NOTE derived from seed-{fam.family_id}"
                ),
                keys=(key,),
                provenance=Provenance((f"seed-{fam.family_id}",), "salted", "bench"),
            )
        )
    lib.apply_batch(add=entries)
    return lib


def run_k_scaling(spec: ExperimentSpec) -> tuple[list[MetricsRow], list[dict]]:
    """Success vs retrieved-entry count, with and without a context budget."""
    embedder = LocalEmbedder()
    rows: list[MetricsRow] = []
    raw: list[dict] = []
    world = _k_scaling_world()
    arms = (("budgeted", spec.context_budget), ("unbounded", None))
    for seed in spec.seeds:
        lib = _k_scaling_library(world, embedder, spec.capacity)
        tasks = spawn_tasks(world, spec.n_tasks, 1, id_prefix=f"ks{seed}", template=0)[0]
        for k in spec.k_sweep:
            for arm, budget in arms:
                records = []
                for task in tasks:
                    rr = retrieve(
                        lib, task, RetrievePolicy(RetrieveKind.BY_KEY, k=k), embedder
                    )
                    rng = random.Random(f"ks:{seed}:{k}:{arm}:{task.task_id}")
                    env = KeyedRooms(world, task)
                    res = run_memory_informed(
                        env,
                        list(rr.contents),
                        rng,
                        AgentProfile(p_err=spec.p_err, context_budget=budget),
                        traj_id=f"ks-{seed}-{k}-{arm}-{task.task_id}",
                    )
                    records.append(
                        _raw_record(
                            spec,
                            seed,
                            arm,
                            k,
                            task,
                            res.trajectory.reward,
                            res.trajectory.step_count,
                            res.token_proxy,
                        )
                    )
                raw.extend(records)
                rows.append(_row_from_records(spec, seed, arm, k, records, lib.active_count()))
    return rows, raw


def _select_rows(rows: Sequence[MetricsRow], selector: Mapping) -> list[MetricsRow]:
    picked = [r for r in rows if r.policy == selector["policy"]]
    if "group_index" in selector and selector["group_index"] is not None:
        picked = [r for r in picked if r.group_index == int(selector["group_index"])]
    return picked


_EPS = 1e-12


def evaluate_assertions(
    spec: ExperimentSpec, rows: Sequence[MetricsRow]
) -> tuple[AssertionResult, ...]:
    """Check the spec's embedded assertions against metric rows.

    ``compare`` takes the mean of a metric over the rows each selector picks
    (so seeds average out) and enforces ``left op right`` with a margin;
    ``non_decreasing`` checks per-group means never drop along group_index.
    """
    results = []
    for a in spec.assertions:
        kind = a.get("type")
        label = a.get("label", kind or "assertion")
        if kind == "compare":
            metric = a["metric"]
            left_rows = _select_rows(rows, a["left"])
            right_rows = _select_rows(rows, a["right"])
            if not left_rows or not right_rows:
                results.append(AssertionResult(label, False, "selector matched no rows"))
                continue
            left = _mean([getattr(r, metric) for r in left_rows])
            right = _mean([getattr(r, metric) for r in right_rows])
            margin = float(a.get("margin", 0.0))
            op = a["op"]
            if op == ">=":
                ok = left >= right + margin - _EPS
            elif op == ">":
                # Strict: must clear the margin by more than float noise.
                ok = left > right + margin + _EPS
            elif op == "<=":
                ok = left <= right - margin + _EPS
            else:
                raise BenchError(f"unknown compare op {op!r}")
            detail = f"left={left:.6f} {op} right={right:.6f} margin={margin}"
            results.append(AssertionResult(label, ok, detail))
        elif kind == "non_decreasing":
            metric = a["metric"]
            per_group: dict[int, list[float]] = {}
            for r in rows:
                if r.policy == a["policy"]:
                    per_group.setdefault(r.group_index, []).append(getattr(r, metric))
            if not per_group:
                results.append(AssertionResult(label, False, "selector matched no rows"))
                continue
            series = [(g, _mean(vals)) for g, vals in sorted(per_group.items())]
            ok = all(b >= a_ - _EPS for (_, a_), (_, b) in zip(series, series[1:]))
            detail = " -> ".join(f"{g}:{v:.4f}" for g, v in series)
            results.append(AssertionResult(label, ok, detail))
        else:
            raise BenchError(f"unknown assertion type {kind!r}")
    return tuple(results)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(rows: Sequence[MetricsRow], path: Path) -> None:
    """Fixed columns, repr floats, sorted rows: reruns are byte-identical."""
    ordered = sorted(rows, key=lambda r: (r.experiment, r.seed, r.policy, r.group_index))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for row in ordered:
            writer.writerow([_fmt(getattr(row, col)) for col in METRICS_COLUMNS])


def write_raw_jsonl(records: Sequence[Mapping], path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def write_plot_data(rows: Sequence[MetricsRow], out_dir: Path) -> list[Path]:
    """One x/y TSV per policy: x = group_index, y = mean success_rate."""
    written = []
    policies = sorted({r.policy for r in rows})
    for policy in policies:
        per_group: dict[int, list[float]] = {}
        for r in rows:
            if r.policy == policy:
                per_group.setdefault(r.group_index, []).append(r.success_rate)
        path = out_dir / f"plot_{policy}.tsv"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for g, vals in sorted(per_group.items()):
                fh.write(f"{g}\t{repr(_mean(vals))}\n")
        written.append(path)
    return written


def run_experiment(spec: ExperimentSpec) -> BenchResult:
    """Run the spec's experiment in memory and evaluate its assertions."""
    derived: dict = {}
    if spec.name == "build_comparison":
        rows, raw = run_build_comparison(spec)
    elif spec.name == "retrieval_comparison":
        rows, raw = run_retrieval_comparison(spec)
    elif spec.name == "update_curves":
        rows, raw, derived = run_update_curves(spec)
    elif spec.name == "transfer":
        rows, raw = run_transfer(spec)
    else:
        rows, raw = run_k_scaling(spec)
    results = evaluate_assertions(spec, rows)
    return BenchResult(
        spec=spec,
        rows=tuple(rows),
        raw=tuple(raw),
        assertion_results=results,
        derived=derived,
    )


def run_spec(
    spec: ExperimentSpec,
    out_dir: str | Path | None = None,
    *,
    force: bool = False,
    emit_plot_data: bool = False,
) -> BenchResult:
    """Run an experiment and write metrics.csv plus raw.jsonl.

    Existing outputs are refused unless ``force``; assertion failures do not
    stop the write (the numbers are the evidence) but are reported in the
    result for the caller to act on.
    """
    result = run_experiment(spec)
    target = Path(out_dir) if out_dir is not None else Path(spec.out_dir)
    target.mkdir(parents=True, exist_ok=True)
    metrics_path = target / "metrics.csv"
    raw_path = target / "raw.jsonl"
    for path in (metrics_path, raw_path):
        if path.exists() and not force:
            raise BenchError(f"refusing to overwrite {path} (pass force)")
    write_metrics_csv(result.rows, metrics_path)
    write_raw_jsonl(result.raw, raw_path)
    if emit_plot_data:
        write_plot_data(result.rows, target)
    return result


def default_spec(name: str, seeds: tuple[int, ...] = (1, 2, 3, 4, 5)) -> ExperimentSpec:
    """Built-in spec for each experiment, margins included."""
    if name == "build_comparison":
        return ExperimentSpec(
            name=name,
            seeds=seeds,
            n_tasks=40,
            out_dir="bench-out/build_comparison",
            assertions=(
                {
                    "type": "compare",
                    "label": "memory cuts steps",
                    "metric": "mean_steps",
                    "left": {"policy": "no_memory"},
                    "op": ">",
                    "right": {"policy": "verbatim"},
                    "margin": 0.0,
                },
                {
                    "type": "compare",
                    "label": "proceduralized needs at most verbatim steps",
                    "metric": "mean_steps",
                    "left": {"policy": "verbatim"},
                    "op": ">=",
                    "right": {"policy": "proceduralized"},
                    "margin": 0.0,
                },
                {
                    "type": "compare",
                    "label": "proceduralized success margin",
                    "metric": "success_rate",
                    "left": {"policy": "proceduralized"},
                    "op": ">=",
                    "right": {"policy": "no_memory"},
                    "margin": 0.15,
                },
            ),
        )
    if name == "retrieval_comparison":
        margin = 0.25
        return ExperimentSpec(
            name=name,
            seeds=seeds,
            n_tasks=40,
            out_dir="bench-out/retrieval_comparison",
            assertions=tuple(
                {
                    "type": "compare",
                    "label": f"{policy} precision beats random",
                    "metric": "success_rate",
                    "left": {"policy": policy},
                    "op": ">=",
                    "right": {"policy": "random"},
                    "margin": margin,
                }
                for policy in ("query", "avefact")
            ),
        )
    if name == "update_curves":
        last = 3
        improves = tuple(
            {
                "type": "compare",
                "label": f"{policy} final group at least first",
                "metric": "success_rate",
                "left": {"policy": policy, "group_index": last},
                "op": ">=",
                "right": {"policy": policy, "group_index": 0},
                "margin": 0.0,
            }
            for policy in ("vanilla", "validated", "adjust")
        )
        return ExperimentSpec(
            name=name,
            seeds=seeds,
            world="uniform_slack",
            n_tasks=80,
            group_count=4,
            p_err=0.3,
            drift_prob=0.15,
            group_size=20,
            out_dir="bench-out/update_curves",
            assertions=improves
            + (
                {
                    "type": "compare",
                    "label": "adjust at least validated",
                    "metric": "success_rate",
                    "left": {"policy": "adjust", "group_index": last},
                    "op": ">=",
                    "right": {"policy": "validated", "group_index": last},
                    "margin": 0.0,
                },
                {
                    "type": "compare",
                    "label": "adjust beats vanilla",
                    "metric": "success_rate",
                    "left": {"policy": "adjust", "group_index": last},
                    "op": ">=",
                    "right": {"policy": "vanilla", "group_index": last},
                    "margin": 0.05,
                },
            ),
        )
    if name == "transfer":
        return ExperimentSpec(
            name=name,
            seeds=seeds,
            n_tasks=40,
            weak_p_err=0.3,
            out_dir="bench-out/transfer",
            assertions=(
                {
                    "type": "compare",
                    "label": "transferred memory lifts success",
                    "metric": "success_rate",
                    "left": {"policy": "weak_with_memory"},
                    "op": ">=",
                    "right": {"policy": "weak_alone"},
                    "margin": 0.10,
                },
                {
                    "type": "compare",
                    "label": "transferred memory saves steps",
                    "metric": "mean_steps",
                    "left": {"policy": "weak_alone"},
                    "op": ">=",
                    "right": {"policy": "weak_with_memory"},
                    "margin": 2.0,
                },
            ),
        )
    if name == "k_scaling":
        return ExperimentSpec(
            name=name,
            seeds=seeds,
            n_tasks=16,
            k_sweep=(1, 2, 4, 8, 16, 32),
            out_dir="bench-out/k_scaling",
            assertions=(
                {
                    "type": "compare",
                    "label": "wider retrieval helps at first",
                    "metric": "success_rate",
                    "left": {"policy": "budgeted", "group_index": 4},
                    "op": ">=",
                    "right": {"policy": "budgeted", "group_index": 1},
                    "margin": 0.0,
                },
                {
                    "type": "compare",
                    "label": "overload hurts under a finite context",
                    "metric": "success_rate",
                    "left": {"policy": "budgeted", "group_index": 32},
                    "op": "<=",
                    "right": {"policy": "budgeted", "group_index": 4},
                    "margin": 0.05,
                },
                {
                    "type": "non_decreasing",
                    "label": "no decline without a context budget",
                    "metric": "success_rate",
                    "policy": "unbounded",
                },
            ),
        )
    raise BenchError(f"no default spec named {name!r} (one of {', '.join(EXPERIMENTS)})")
