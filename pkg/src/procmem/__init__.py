"""procmem: procedural memory for task-executing agents."""

from .bench import (
    EXPERIMENTS,
    BenchError,
    BenchResult,
    ExperimentSpec,
    default_spec,
    load_spec,
    run_experiment,
    run_spec,
)
from .builder import (
    PROCEDURALIZED_SEPARATOR,
    BuildError,
    Builder,
    RemoteAbstractor,
    RuleBasedAbstractor,
    filter_gold,
)
from .config import Config, ConfigError, embedder_from_config, load_config_file, resolve_config
from .core import (
    EntryKind,
    EntryStats,
    EntryStatus,
    MemoryEntry,
    MemoryKey,
    MemoryLibrary,
    ProcmemError,
    Provenance,
    Step,
    TaskSpec,
    Trajectory,
    TrajectoryParseError,
    parse_trajectory,
    serialize_trajectory,
    whitespace_token_count,
)
from .embedding import (
    DEFAULT_DIM,
    EmbeddingError,
    Embedder,
    LocalEmbedder,
    RemoteEmbedder,
    cosine,
    embed_text,
    extract_keywords,
    tokenize,
)
from .envsim import (
    AgentProfile,
    EnvError,
    EpisodeResult,
    Family,
    KeyedRooms,
    WorldConfig,
    default_world,
    demo_task,
    demo_world,
    run_memory_free,
    run_memory_informed,
    spawn_tasks,
    world_from_dict,
    world_to_dict,
)
from .retriever import (
    KeyKind,
    KeyPolicy,
    RetrievalResult,
    RetrieveKind,
    RetrievePolicy,
    keyer_for,
    make_keys,
    retrieve,
    score_entry,
)
from .store import (
    ImportReport,
    StoreError,
    StoreManifest,
    StoreParseError,
    export_store,
    import_store,
    library_stats,
    load_store,
    read_manifest,
    save_store,
)
from .updater import (
    DeprecationRule,
    ExecutionFeedback,
    UpdateKind,
    UpdatePolicy,
    UpdateReport,
    deprecate_and_evict,
    run_update,
    run_update_batches,
)

__version__ = "0.1.0"

__all__ = [
    "EXPERIMENTS",
    "BenchError",
    "BenchResult",
    "ExperimentSpec",
    "default_spec",
    "load_spec",
    "run_experiment",
    "run_spec",
    "PROCEDURALIZED_SEPARATOR",
    "BuildError",
    "Builder",
    "RemoteAbstractor",
    "RuleBasedAbstractor",
    "filter_gold",
    "Config",
    "ConfigError",
    "embedder_from_config",
    "load_config_file",
    "resolve_config",
    "EntryKind",
    "EntryStats",
    "EntryStatus",
    "MemoryEntry",
    "MemoryKey",
    "MemoryLibrary",
    "ProcmemError",
    "Provenance",
    "Step",
    "TaskSpec",
    "Trajectory",
    "TrajectoryParseError",
    "parse_trajectory",
    "serialize_trajectory",
    "whitespace_token_count",
    "DEFAULT_DIM",
    "EmbeddingError",
    "Embedder",
    "LocalEmbedder",
    "RemoteEmbedder",
    "cosine",
    "embed_text",
    "extract_keywords",
    "tokenize",
    "AgentProfile",
    "EnvError",
    "EpisodeResult",
    "Family",
    "KeyedRooms",
    "WorldConfig",
    "default_world",
    "demo_task",
    "demo_world",
    "run_memory_free",
    "run_memory_informed",
    "spawn_tasks",
    "world_from_dict",
    "world_to_dict",
    "KeyKind",
    "KeyPolicy",
    "RetrievalResult",
    "RetrieveKind",
    "RetrievePolicy",
    "keyer_for",
    "make_keys",
    "retrieve",
    "score_entry",
    "ImportReport",
    "StoreError",
    "StoreManifest",
    "StoreParseError",
    "export_store",
    "import_store",
    "library_stats",
    "load_store",
    "read_manifest",
    "save_store",
    "DeprecationRule",
    "ExecutionFeedback",
    "UpdateKind",
    "UpdatePolicy",
    "UpdateReport",
    "deprecate_and_evict",
    "run_update",
    "run_update_batches",
    "__version__",
]
