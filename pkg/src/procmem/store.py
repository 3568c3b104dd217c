"""JSONL persistence for memory libraries, plus export/import between agents.

File layout: line 1 is a manifest object, every following line is one entry.
The manifest pins the embedding backend, stopword list hash, and vector
dimension so two stores can refuse to merge when their key vectors are not
comparable. Saves are atomic (temp file + rename) and guarded by an advisory
lock file next to the store.
"""

from __future__ import annotations

import json
import os
import statistics
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

from .core import (
    EntryKind,
    EntryStats,
    EntryStatus,
    MemoryEntry,
    MemoryKey,
    MemoryLibrary,
    ProcmemError,
    Provenance,
)
from .embedding import LOCAL_BACKEND_ID, stopword_file_hash

__all__ = [
    "FORMAT_VERSION",
    "StoreError",
    "StoreParseError",
    "MissingManifestError",
    "BadFormatVersionError",
    "DuplicateEntryIdError",
    "DimensionMismatchError",
    "StoreLockError",
    "ImportRefusedError",
    "StoreManifest",
    "ImportReport",
    "store_lock",
    "save_store",
    "load_store",
    "read_manifest",
    "export_store",
    "import_store",
    "library_stats",
]

FORMAT_VERSION = 1

_MANIFEST_KEYS = (
    "format_version",
    "generation",
    "capacity",
    "embed_dim",
    "embedder_backend",
    "stopword_hash",
)
_ENTRY_KEYS = ("entry_id", "kind", "content", "keys", "provenance", "stats", "status")


class StoreError(ProcmemError):
    """Base class for store file problems."""


class StoreParseError(StoreError):
    """A line could not be decoded or is missing required fields."""

    def __init__(self, line_no: int, message: str) -> None:
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class MissingManifestError(StoreError):
    """The file does not start with a manifest line."""


class BadFormatVersionError(StoreError):
    """The manifest declares a format this code does not read."""


class DuplicateEntryIdError(StoreError):
    """Two entry lines share an id."""


class DimensionMismatchError(StoreError):
    """A key vector does not match the manifest's embed_dim."""


class StoreLockError(StoreError):
    """Another writer holds the advisory lock."""


class ImportRefusedError(StoreError):
    """Source and destination stores are not key-compatible."""


@dataclass(frozen=True)
class StoreManifest:
    format_version: int
    generation: int
    capacity: int
    embed_dim: int
    embedder_backend: str
    stopword_hash: str


@dataclass(frozen=True)
class ImportReport:
    """What an import did: new ids, renames applied, and exact duplicates skipped."""

    merged_ids: tuple[str, ...]
    renamed: tuple[tuple[str, str], ...]
    already_present: tuple[str, ...]
    skipped: tuple[tuple[str, str], ...]
    generation_before: int
    generation_after: int

    @property
    def merged_count(self) -> int:
        return len(self.merged_ids)


@contextmanager
def store_lock(path: str | os.PathLike[str]) -> Iterator[None]:
    """Advisory single-writer lock: <store>.lock created with O_EXCL.

    Purely cooperative; readers ignore it. A crash can leave the file behind,
    in which case the error names it so the operator can remove it.
    """
    lock_path = Path(f"{os.fspath(path)}.lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StoreLockError(
            f"store is locked by another writer (remove {lock_path} if stale)"
        ) from None
    try:
        os.close(fd)
        yield
    finally:
        try:
            os.unlink(lock_path)
        except FileNotFoundError:
            pass


def _entry_record(entry: MemoryEntry) -> dict:
    return {
        "entry_id": entry.entry_id,
        "kind": entry.kind.value,
        "content": entry.content,
        "keys": [{"text": k.text, "vec": list(k.vec)} for k in entry.keys],
        "provenance": {
            "source_traj_ids": list(entry.provenance.source_traj_ids),
            "builder_policy": entry.provenance.builder_policy,
            "origin_agent": entry.provenance.origin_agent,
            "created_group": entry.provenance.created_group,
        },
        "stats": {
            "retrieved_count": entry.stats.retrieved_count,
            "success_count": entry.stats.success_count,
            "failure_count": entry.stats.failure_count,
            "revision": entry.stats.revision,
        },
        "status": entry.status.value,
    }


def save_store(
    library: MemoryLibrary,
    path: str | os.PathLike[str],
    *,
    embedder_backend: str = LOCAL_BACKEND_ID,
    stopword_hash: str | None = None,
) -> None:
    """Write the whole library (Deprecated entries included) atomically.

    Entries are written in id order and floats round-trip exactly through
    JSON, so saving the same library twice yields byte-identical files.
    """
    target = Path(path)
    manifest = {
        "format_version": FORMAT_VERSION,
        "generation": library.generation,
        "capacity": library.capacity,
        "embed_dim": library.embed_dim,
        "embedder_backend": embedder_backend,
        "stopword_hash": stopword_hash if stopword_hash is not None else stopword_file_hash(),
    }
    with store_lock(target):
        fd, tmp_name = tempfile.mkstemp(dir=target.parent or Path("."), suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")))
                fh.write("\n")
                for entry in library.entries():
                    fh.write(json.dumps(_entry_record(entry), sort_keys=True, separators=(",", ":")))
                    fh.write("\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp_name, target)
        except BaseException:
            try:
                os.unlink(tmp_name)
            except FileNotFoundError:
                pass
            raise


def _parse_manifest(line: str) -> StoreManifest:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise MissingManifestError(f"first line is not a JSON manifest: {exc}") from None
    if not isinstance(data, dict) or any(k not in data for k in _MANIFEST_KEYS):
        raise MissingManifestError("first line lacks the manifest fields")
    if data["format_version"] != FORMAT_VERSION:
        raise BadFormatVersionError(
            f"format_version {data['format_version']!r} is not supported (expected {FORMAT_VERSION})"
        )
    return StoreManifest(
        format_version=int(data["format_version"]),
        generation=int(data["generation"]),
        capacity=int(data["capacity"]),
        embed_dim=int(data["embed_dim"]),
        embedder_backend=str(data["embedder_backend"]),
        stopword_hash=str(data["stopword_hash"]),
    )


def _parse_entry(line: str, line_no: int, embed_dim: int) -> MemoryEntry:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise StoreParseError(line_no, f"corrupt entry record: {exc.msg}") from None
    if not isinstance(data, dict):
        raise StoreParseError(line_no, "entry record is not an object")
    missing = [k for k in _ENTRY_KEYS if k not in data]
    if missing:
        raise StoreParseError(line_no, f"entry record missing fields: {', '.join(missing)}")
    try:
        keys = tuple(
            MemoryKey(text=str(k["text"]), vec=tuple(float(x) for x in k["vec"]))
            for k in data["keys"]
        )
        prov = data["provenance"]
        stats = data["stats"]
        entry = MemoryEntry(
            entry_id=str(data["entry_id"]),
            kind=EntryKind(data["kind"]),
            content=str(data["content"]),
            keys=keys,
            provenance=Provenance(
                source_traj_ids=tuple(str(t) for t in prov["source_traj_ids"]),
                builder_policy=str(prov["builder_policy"]),
                origin_agent=str(prov["origin_agent"]),
                created_group=int(prov["created_group"]),
            ),
            stats=EntryStats(
                retrieved_count=int(stats["retrieved_count"]),
                success_count=int(stats["success_count"]),
                failure_count=int(stats["failure_count"]),
                revision=int(stats["revision"]),
            ),
            status=EntryStatus(data["status"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise StoreParseError(line_no, f"bad entry record: {exc}") from None
    for key in entry.keys:
        if len(key.vec) != embed_dim:
            raise DimensionMismatchError(
                f"entry {entry.entry_id} has a {len(key.vec)}-dim key but the store is {embed_dim}-dim"
            )
    return entry


def _read_lines(path: str | os.PathLike[str]) -> list[str]:
    target = Path(path)
    if not target.exists():
        raise StoreError(f"no store file at {target}")
    text = target.read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MissingManifestError("store file is empty")
    return lines


def read_manifest(path: str | os.PathLike[str]) -> StoreManifest:
    return _parse_manifest(_read_lines(path)[0])


def _load(path: str | os.PathLike[str]) -> tuple[StoreManifest, list[MemoryEntry]]:
    lines = _read_lines(path)
    manifest = _parse_manifest(lines[0])
    entries: list[MemoryEntry] = []
    seen: set[str] = set()
    for line_no, line in enumerate(lines[1:], start=2):
        entry = _parse_entry(line, line_no, manifest.embed_dim)
        if entry.entry_id in seen:
            raise DuplicateEntryIdError(f"entry id appears twice: {entry.entry_id}")
        seen.add(entry.entry_id)
        entries.append(entry)
    return manifest, entries


def load_store(path: str | os.PathLike[str]) -> MemoryLibrary:
    """Read a store file back into a library, generation preserved."""
    manifest, entries = _load(path)
    try:
        return MemoryLibrary.restore(
            capacity=manifest.capacity,
            embed_dim=manifest.embed_dim,
            generation=manifest.generation,
            entries=entries,
        )
    except ValueError as exc:
        raise StoreError(str(exc)) from None


def export_store(
    library: MemoryLibrary,
    path: str | os.PathLike[str],
    *,
    embedder_backend: str = LOCAL_BACKEND_ID,
    stopword_hash: str | None = None,
) -> None:
    """Write a transferable copy of the library. Same format as save_store."""
    save_store(library, path, embedder_backend=embedder_backend, stopword_hash=stopword_hash)


def _same_payload(a: MemoryEntry, b: MemoryEntry) -> bool:
    return (
        a.kind is b.kind
        and a.content == b.content
        and a.keys == b.keys
        and a.provenance == b.provenance
    )


def import_store(
    path: str | os.PathLike[str],
    into: MemoryLibrary,
    *,
    expect_backend: str = LOCAL_BACKEND_ID,
    expect_stopword_hash: str | None = None,
) -> ImportReport:
    """Merge another agent's exported store into ``into``.

    Only Active entries cross over. An id collision is resolved by
    re-prefixing the incoming id with its origin agent; an incoming entry
    whose payload already exists under either id is skipped, which makes
    importing the same file twice a no-op. Refuses outright when the vector
    spaces differ (backend id, stopword hash, or dimension).
    """
    manifest, entries = _load(path)
    want_hash = expect_stopword_hash if expect_stopword_hash is not None else stopword_file_hash()
    if manifest.embedder_backend != expect_backend:
        raise ImportRefusedError(
            f"embedder backend mismatch: store has {manifest.embedder_backend!r}, expected {expect_backend!r}"
        )
    if manifest.stopword_hash != want_hash:
        raise ImportRefusedError("stopword list mismatch: key vectors are not comparable")
    if manifest.embed_dim != into.embed_dim:
        raise ImportRefusedError(
            f"embed_dim mismatch: store is {manifest.embed_dim}-dim, library is {into.embed_dim}-dim"
        )

    existing = {e.entry_id: e for e in into.entries()}
    generation_before = into.generation
    additions: list[MemoryEntry] = []
    merged: list[str] = []
    renamed: list[tuple[str, str]] = []
    present: list[str] = []
    skipped: list[tuple[str, str]] = []
    for entry in entries:
        if entry.status is not EntryStatus.ACTIVE:
            continue
        alt_id = f"{entry.provenance.origin_agent}-{entry.entry_id}"
        dup = next(
            (
                eid
                for eid in (entry.entry_id, alt_id)
                if eid in existing and _same_payload(existing[eid], entry)
            ),
            None,
        )
        if dup is not None:
            present.append(dup)
            continue
        if entry.entry_id not in existing:
            new_id = entry.entry_id
        elif alt_id not in existing:
            new_id = alt_id
            renamed.append((entry.entry_id, alt_id))
        else:
            skipped.append((entry.entry_id, "id and re-prefixed id both taken"))
            continue
        staged = entry if new_id == entry.entry_id else replace(entry, entry_id=new_id)
        existing[new_id] = staged
        additions.append(staged)
        merged.append(new_id)
    if additions:
        into.apply_batch(add=additions)
    return ImportReport(
        merged_ids=tuple(merged),
        renamed=tuple(renamed),
        already_present=tuple(present),
        skipped=tuple(skipped),
        generation_before=generation_before,
        generation_after=into.generation,
    )


def library_stats(library: MemoryLibrary) -> dict:
    """Operator summary: counts by kind and status, help-rate deciles,
    generation, and capacity utilization."""
    entries = library.entries()
    by_kind: dict[str, int] = {}
    by_status: dict[str, int] = {}
    for entry in entries:
        by_kind[entry.kind.value] = by_kind.get(entry.kind.value, 0) + 1
        by_status[entry.status.value] = by_status.get(entry.status.value, 0) + 1
    rates = sorted(e.help_rate() for e in entries if e.status is EntryStatus.ACTIVE)
    if len(rates) >= 2:
        deciles = statistics.quantiles(rates, n=10, method="inclusive")
    elif rates:
        deciles = [rates[0]] * 9
    else:
        deciles = []
    active = by_status.get(EntryStatus.ACTIVE.value, 0)
    return {
        "generation": library.generation,
        "capacity": library.capacity,
        "embed_dim": library.embed_dim,
        "entries": len(entries),
        "by_kind": dict(sorted(by_kind.items())),
        "by_status": dict(sorted(by_status.items())),
        "capacity_utilization": active / library.capacity,
        "help_rate_deciles": [round(x, 6) for x in deciles],
    }
