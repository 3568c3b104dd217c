"""Command line interface.

Nine subcommands drive the whole lifecycle from a shell: ingest raw
trajectory text, build entries into a store, retrieve against a task,
fold execution feedback back in, run benchmark experiments, walk through
the simulated environment, and move stores between agents.

Global flags work both before and after the subcommand. ``--json`` makes
every command print one machine-parseable JSON object on stdout. Exit
codes: 0 success, 1 benchmark assertion failure, 2 anything else.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys
from pathlib import Path

from .bench import load_spec, run_spec
from .builder import Builder, RuleBasedAbstractor, filter_gold
from .config import (
    Config,
    ConfigError,
    embedder_from_config,
    load_config_file,
    resolve_config,
)
from .core import (
    EntryKind,
    MemoryLibrary,
    ProcmemError,
    Trajectory,
    parse_trajectory,
    serialize_trajectory,
)
from .embedding import LocalEmbedder
from .envsim import (
    AgentProfile,
    KeyedRooms,
    demo_task,
    demo_world,
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
    retrieve,
)
from .store import (
    import_store,
    library_stats,
    load_store,
    read_manifest,
    save_store,
)
from .updater import ExecutionFeedback, UpdateKind, UpdatePolicy, run_update_batches

__all__ = ["main", "build_parser"]

_SUPPRESS = argparse.SUPPRESS


def _add_common(sub: argparse.ArgumentParser, *, config_flag: bool = True) -> None:
    """Re-register global flags on a subparser so they work after the
    subcommand too; SUPPRESS keeps absent flags from clobbering the
    top-level values."""
    sub.add_argument("--store", default=_SUPPRESS, metavar="PATH", help="memory store file")
    if config_flag:
        sub.add_argument("--config", default=_SUPPRESS, metavar="PATH", help="JSON config file")
    sub.add_argument("--seed", type=int, default=_SUPPRESS, help="seed for seeded operations")
    sub.add_argument("--json", action="store_true", default=_SUPPRESS, help="print JSON output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="procmem",
        description="Procedural memory for task-executing agents.",
    )
    parser.add_argument("--store", default=None, metavar="PATH", help="memory store file")
    parser.add_argument("--config", default=None, metavar="PATH", help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="seed for seeded operations")
    parser.add_argument("--json", action="store_true", default=False, help="print JSON output")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = commands.add_parser("ingest", help="normalize trajectory text files into JSONL")
    _add_common(p)
    p.add_argument("files", nargs="+", metavar="FILE", help="trajectory text files")
    p.add_argument("--out", default="-", metavar="PATH", help="output JSONL path, '-' for stdout")
    p.set_defaults(func=cmd_ingest)

    p = commands.add_parser("build", help="build memory entries from ingested trajectories")
    _add_common(p)
    p.add_argument("--trajectories", required=True, metavar="PATH", help="JSONL from ingest")
    p.add_argument("--kind", choices=[k.value for k in EntryKind], default=None)
    p.add_argument("--agent", default="local", help="origin agent tag recorded in provenance")
    p.add_argument("--group", type=int, default=0, help="created_group stamped on new entries")
    p.set_defaults(func=cmd_build)

    p = commands.add_parser("retrieve", help="rank stored entries against a task description")
    _add_common(p)
    p.add_argument("--task", required=True, metavar="TEXT", help="task description to match")
    p.add_argument("--policy", choices=["query", "avefact", "random"], default=None)
    p.add_argument("--k", type=int, default=None, help="how many entries to return")
    p.set_defaults(func=cmd_retrieve)

    p = commands.add_parser("update", help="fold execution feedback into the store")
    _add_common(p)
    p.add_argument("--feedback", required=True, metavar="PATH", help="feedback JSONL")
    p.add_argument("--policy", choices=[k.value for k in UpdateKind], default=None)
    p.add_argument("--group-size", type=int, default=None, dest="group_size")
    p.add_argument("--start-group", type=int, default=0, dest="start_group")
    p.add_argument("--kind", choices=[k.value for k in EntryKind], default=None,
                   help="entry kind for newly minted entries")
    p.add_argument("--agent", default="local", help="origin agent tag for minted entries")
    p.set_defaults(func=cmd_update)

    p = commands.add_parser("bench", help="run a benchmark experiment spec")
    _add_common(p)
    p.add_argument("--spec", required=True, metavar="PATH",
                   help="experiment spec JSON, or default:<experiment>")
    p.add_argument("--force", action="store_true", help="overwrite existing result files")
    p.add_argument("--emit-plot-data", action="store_true", dest="emit_plot_data",
                   help="also write plain x/y TSV per policy")
    p.add_argument("--out-dir", default=None, dest="out_dir", help="override spec out_dir")
    p.set_defaults(func=cmd_bench)

    p = commands.add_parser("env", help="simulated environment utilities")
    env_sub = p.add_subparsers(dest="env_command", required=True, metavar="SUBCOMMAND")
    d = env_sub.add_parser("demo", help="step-by-step walkthrough of one task")
    # --config means the world file here, so the tool config flag is not
    # re-registered; the top-level --config still works before the subcommand.
    _add_common(d, config_flag=False)
    d.add_argument("--config", default=None, dest="world_config", metavar="PATH",
                   help="world config JSON (defaults to the built-in demo world)")
    d.add_argument("--task", default=None, metavar="ID", help="task or family id to run")
    d.set_defaults(func=cmd_env_demo)

    p = commands.add_parser("export", help="write the store to a transferable file")
    _add_common(p)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=cmd_export)

    p = commands.add_parser("import", help="merge an exported store into this one")
    _add_common(p)
    p.add_argument("--from", required=True, metavar="PATH", dest="source")
    p.set_defaults(func=cmd_import)

    p = commands.add_parser("stats", help="summarize the store")
    _add_common(p)
    p.set_defaults(func=cmd_stats)
    return parser


def _emit(args: argparse.Namespace, payload: dict, lines: list[str]) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, sort_keys=True))
    else:
        for line in lines:
            print(line)


def _require_store(config: Config) -> str:
    if not config.store_path:
        raise ConfigError("no store configured; pass --store or set PROCMEM_STORE")
    return config.store_path


def _load_or_new(config: Config) -> tuple[str, MemoryLibrary]:
    path = _require_store(config)
    if Path(path).exists():
        return path, load_store(path)
    return path, MemoryLibrary(capacity=config.capacity, embed_dim=config.embed_dim)


def _embedder_for(config: Config, library: MemoryLibrary):
    # Key vectors must live in the store's space, not whatever dimension
    # the config happens to default to. The local backend can be rebuilt
    # at any width; a remote service cannot, so a mismatch there is fatal.
    embedder = embedder_from_config(config)
    if embedder.dim == library.embed_dim:
        return embedder
    if config.embed_url:
        raise ConfigError(
            f"store {library.embed_dim}-dim but remote embedder serves "
            f"{embedder.dim}-dim vectors"
        )
    return LocalEmbedder(dim=library.embed_dim)


def _builder(args: argparse.Namespace, config: Config, kind_flag: str | None,
             library: MemoryLibrary) -> Builder:
    # Entry ids embed the generation at load time: the counter makes ids
    # unique within a run, the generation across runs against one store.
    kind = EntryKind(kind_flag if kind_flag else config.build_kind)
    embedder = _embedder_for(config, library)
    key_policy = KeyPolicy(kind=KeyKind(config.key_policy), max_keywords=config.max_keywords)
    return Builder(
        kind=kind,
        keyer=keyer_for(key_policy, embedder),
        abstractor=RuleBasedAbstractor(),
        origin_agent=args.agent,
        id_prefix=f"{args.agent}-g{library.generation}",
        gold_threshold=config.gold_threshold,
    )


# ---------------------------------------------------------------- commands


def cmd_ingest(args: argparse.Namespace, config: Config) -> int:
    records: list[dict] = []
    for file_name in args.files:
        text = Path(file_name).read_text(encoding="utf-8")
        chunks = [c for c in text.split("\n\n") if c.strip()]
        stem = Path(file_name).stem
        for i, chunk in enumerate(chunks):
            traj = parse_trajectory(chunk.strip("\n"))
            traj_id = stem if len(chunks) == 1 else f"{stem}-{i:03d}"
            records.append({"traj_id": traj_id, "text": serialize_trajectory(traj)})
    out_lines = [json.dumps(r, sort_keys=True) for r in records]
    if args.out == "-":
        if getattr(args, "json", False):
            _emit(args, {"count": len(records), "trajectories": records}, [])
        else:
            for line in out_lines:
                print(line)
            print(f"ingested {len(records)} trajectories", file=sys.stderr)
    else:
        Path(args.out).write_text("\n".join(out_lines) + "\n", encoding="utf-8")
        _emit(
            args,
            {"count": len(records), "out": args.out},
            [f"ingested {len(records)} trajectories -> {args.out}"],
        )
    return 0


def _read_jsonl(path: str) -> list[dict]:
    rows = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProcmemError(f"{path}:{line_no}: bad JSON: {exc}") from None
        if not isinstance(row, dict):
            raise ProcmemError(f"{path}:{line_no}: expected a JSON object")
        rows.append(row)
    return rows


def cmd_build(args: argparse.Namespace, config: Config) -> int:
    path, library = _load_or_new(config)
    trajectories: list[Trajectory] = []
    for row in _read_jsonl(args.trajectories):
        if "text" not in row:
            raise ProcmemError(f"{args.trajectories}: record missing 'text'")
        traj = parse_trajectory(row["text"])
        if row.get("traj_id"):
            traj = Trajectory(
                traj_id=str(row["traj_id"]), task=traj.task, steps=traj.steps, reward=traj.reward
            )
        trajectories.append(traj)
    gold = filter_gold(trajectories, config.gold_threshold)
    builder = _builder(args, config, args.kind, library)
    entries = [builder.build(t, created_group=args.group) for t in gold]
    generation = library.apply_batch(add=entries)
    save_store(library, path)
    payload = {
        "built": len(entries),
        "skipped_below_gold": len(trajectories) - len(gold),
        "entry_ids": [e.entry_id for e in entries],
        "generation": generation,
        "store": path,
    }
    _emit(
        args,
        payload,
        [
            f"built {len(entries)} entries "
            f"({len(trajectories) - len(gold)} below gold threshold), "
            f"store {path} at generation {generation}"
        ],
    )
    return 0


def cmd_retrieve(args: argparse.Namespace, config: Config) -> int:
    path = _require_store(config)
    library = load_store(path)
    embedder = _embedder_for(config, library)
    policy_name = args.policy if args.policy else config.key_policy
    k = args.k if args.k is not None else config.retrieve_k
    if policy_name == "random":
        policy = RetrievePolicy(
            kind=RetrieveKind.RANDOM, k=k, key_policy=KeyPolicy(KeyKind.QUERY), seed=config.seed
        )
    else:
        policy = RetrievePolicy(
            kind=RetrieveKind.BY_KEY,
            k=k,
            key_policy=KeyPolicy(
                KeyKind(policy_name),
                max_keywords=config.max_keywords,
                hard_match=config.avefact_hard_match,
            ),
        )
    result = retrieve(library, args.task, policy, embedder)
    save_store(library, path)  # persist the retrieved_count bumps
    payload = {
        "policy": result.policy_label,
        "fell_back_to_query": result.fell_back_to_query,
        "generation": result.library_generation,
        "results": [
            {
                "entry_id": s.entry.entry_id,
                "score": s.score,
                "kind": s.entry.kind.value,
                "content": s.entry.content,
            }
            for s in result.ranked
        ],
    }
    _emit(args, payload, [f"{s.entry.entry_id}\t{s.score!r}" for s in result.ranked])
    return 0


def _feedback_from_row(row: dict, source: str) -> ExecutionFeedback:
    try:
        traj_text = row.get("trajectory")
        trajectory = None
        if traj_text:
            trajectory = parse_trajectory(traj_text)
            if row.get("task_id"):
                trajectory = Trajectory(
                    traj_id=str(row["task_id"]),
                    task=trajectory.task,
                    steps=trajectory.steps,
                    reward=trajectory.reward,
                )
        return ExecutionFeedback(
            task_id=str(row["task_id"]),
            reward=float(row["reward"]),
            success=bool(row["success"]),
            steps_used=int(row["steps_used"]),
            retrieved_entry_ids=tuple(row.get("retrieved_entry_ids", ())),
            trajectory=trajectory,
        )
    except KeyError as exc:
        raise ProcmemError(f"{source}: feedback record missing {exc}") from None


def cmd_update(args: argparse.Namespace, config: Config) -> int:
    path = _require_store(config)
    library = load_store(path)
    feedbacks = [_feedback_from_row(r, args.feedback) for r in _read_jsonl(args.feedback)]
    kind = UpdateKind(args.policy if args.policy else config.update_policy)
    group_size = args.group_size if args.group_size is not None else config.group_size
    policy = UpdatePolicy(kind=kind, group_size=group_size)
    builder = _builder(args, config, args.kind, library)
    reports = run_update_batches(
        library, feedbacks, policy, builder, start_group=args.start_group
    )
    save_store(library, path)
    payload = {
        "policy": kind.value,
        "batches": [
            {
                "added": list(r.added),
                "removed": list(r.removed),
                "updated": list(r.updated),
                "skipped": [list(pair) for pair in r.skipped],
                "generation_before": r.generation_before,
                "generation_after": r.generation_after,
            }
            for r in reports
        ],
        "generation": library.generation,
        "store": path,
    }
    lines = []
    for i, r in enumerate(reports):
        lines.append(
            f"batch {args.start_group + i}: added={len(r.added)} removed={len(r.removed)} "
            f"updated={len(r.updated)} skipped={len(r.skipped)} "
            f"generation {r.generation_before}->{r.generation_after}"
        )
    _emit(args, payload, lines)
    return 0


def cmd_bench(args: argparse.Namespace, config: Config) -> int:
    spec = load_spec(args.spec)
    result = run_spec(
        spec, out_dir=args.out_dir, force=args.force, emit_plot_data=args.emit_plot_data
    )
    out_dir = args.out_dir if args.out_dir else spec.out_dir
    payload = {
        "experiment": spec.name,
        "passed": result.passed,
        "assertions": [
            {"label": a.label, "passed": a.passed, "detail": a.detail}
            for a in result.assertion_results
        ],
        "rows": len(result.rows),
        "out_dir": out_dir,
        "derived": result.derived,
    }
    lines = [f"experiment {spec.name}: {len(result.rows)} metric rows -> {out_dir}"]
    for a in result.assertion_results:
        lines.append(f"{'PASS' if a.passed else 'FAIL'} {a.label}: {a.detail}")
    for key, value in result.derived.items():
        lines.append(f"derived {key}: {json.dumps(value, sort_keys=True)}")
    lines.append("all assertions passed" if result.passed else "ASSERTION FAILURE")
    _emit(args, payload, lines)
    return 0 if result.passed else 1


def cmd_env_demo(args: argparse.Namespace, config: Config) -> int:
    world_path = args.world_config if args.world_config else config.world_path
    if world_path:
        world = world_from_dict(json.loads(Path(world_path).read_text(encoding="utf-8")))
        tasks = spawn_tasks(world, len(world.families), 1, id_prefix="demo", template=0)[0]
        if args.task:
            matches = [t for t in tasks if args.task in (t.task_id, t.family_id)]
            if not matches:
                known = ", ".join(t.task_id for t in tasks)
                raise ProcmemError(f"no task {args.task!r}; available: {known}")
            task = matches[0]
        else:
            task = tasks[0]
    else:
        world = demo_world()
        task = demo_task()
        if args.task and args.task not in (task.task_id, task.family_id):
            raise ProcmemError(f"demo world only has {task.task_id!r} ({task.family_id!r})")

    profile = AgentProfile(p_err=config.p_err, context_budget=config.context_budget)
    group = int(task.metadata.get("group", "0"))

    free = run_memory_free(
        KeyedRooms(world, task, group_index=group),
        random.Random(f"demo:{config.seed}:free"),
        profile,
        traj_id=f"{task.task_id}-free",
    )
    library = MemoryLibrary(capacity=config.capacity, embed_dim=config.embed_dim)
    builder = _builder(
        argparse.Namespace(agent="demo"), config, EntryKind.PROCEDURALIZED.value, library
    )
    entry = builder.build(free.trajectory, created_group=group)
    informed = run_memory_informed(
        KeyedRooms(world, task, group_index=group),
        [entry.content],
        random.Random(f"demo:{config.seed}:informed"),
        profile,
        traj_id=f"{task.task_id}-informed",
    )

    free_steps = free.trajectory.step_count
    informed_steps = informed.trajectory.step_count
    payload = {
        "world": world.world_id,
        "task": {"task_id": task.task_id, "description": task.description,
                 "family_id": task.family_id},
        "memory_free": {
            "steps": free_steps,
            "reward": free.trajectory.reward,
            "token_proxy": free.token_proxy,
            "trajectory": serialize_trajectory(free.trajectory),
        },
        "entry": {"entry_id": entry.entry_id, "kind": entry.kind.value, "content": entry.content},
        "memory_informed": {
            "steps": informed_steps,
            "reward": informed.trajectory.reward,
            "token_proxy": informed.token_proxy,
            "trajectory": serialize_trajectory(informed.trajectory),
        },
        "steps_saved": free_steps - informed_steps,
    }
    lines = [
        f"world {world.world_id}, task {task.task_id}: {task.description}",
        "",
        "[memory-free]",
        serialize_trajectory(free.trajectory),
        f"steps={free_steps} reward={free.trajectory.reward!r} tokens={free.token_proxy}",
        "",
        f"[entry {entry.entry_id} kind={entry.kind.value}]",
        entry.content.split("\n---\n")[0],
        "",
        "[memory-informed]",
        serialize_trajectory(informed.trajectory),
        f"steps={informed_steps} reward={informed.trajectory.reward!r} "
        f"tokens={informed.token_proxy}",
        "",
        f"steps saved: {free_steps - informed_steps}",
    ]
    _emit(args, payload, lines)
    return 0


def cmd_export(args: argparse.Namespace, config: Config) -> int:
    path = _require_store(config)
    library = load_store(path)
    save_store(library, args.out)
    payload = {
        "store": path,
        "out": args.out,
        "entries": len(library.entries()),
        "generation": library.generation,
    }
    _emit(args, payload, [f"exported {len(library.entries())} entries -> {args.out}"])
    return 0


def cmd_import(args: argparse.Namespace, config: Config) -> int:
    path = _require_store(config)
    if Path(path).exists():
        library = load_store(path)
    else:
        # A brand-new receiving store mirrors the source's embedding dims.
        manifest = read_manifest(args.source)
        library = MemoryLibrary(capacity=config.capacity, embed_dim=manifest.embed_dim)
    report = import_store(args.source, library)
    save_store(library, path)
    payload = {
        "merged": list(report.merged_ids),
        "renamed": {k: v for k, v in report.renamed},
        "already_present": list(report.already_present),
        "skipped": [list(pair) for pair in report.skipped],
        "generation_before": report.generation_before,
        "generation_after": report.generation_after,
        "store": path,
    }
    lines = [
        f"merged {report.merged_count} entries from {args.source} "
        f"({len(report.already_present)} already present, {len(report.skipped)} skipped), "
        f"generation {report.generation_before}->{report.generation_after}"
    ]
    for old, new in report.renamed:
        lines.append(f"renamed {old} -> {new}")
    _emit(args, payload, lines)
    return 0


def cmd_stats(args: argparse.Namespace, config: Config) -> int:
    path = _require_store(config)
    stats = library_stats(load_store(path))
    lines = [
        f"store {path}",
        f"generation {stats['generation']}",
        f"entries {stats['entries']}",
        "by kind: "
        + (", ".join(f"{k}={v}" for k, v in sorted(stats["by_kind"].items())) or "none"),
        "by status: "
        + (", ".join(f"{k}={v}" for k, v in sorted(stats["by_status"].items())) or "none"),
        f"capacity {stats['capacity']} (utilization {stats['capacity_utilization']})",
        f"embed dim {stats['embed_dim']}",
        f"help-rate deciles: {stats['help_rate_deciles']}",
    ]
    _emit(args, dict(stats, store=path), lines)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        file_values = load_config_file(args.config) if getattr(args, "config", None) else None
        flags = {
            "store_path": getattr(args, "store", None),
            "seed": getattr(args, "seed", None),
        }
        config = resolve_config(file_values, flags, os.environ)
        return args.func(args, config)
    except ProcmemError as exc:
        print(f"procmem: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"procmem: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
