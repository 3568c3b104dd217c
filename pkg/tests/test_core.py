"""Core type and library semantics: canonical text, batches, generations."""

from __future__ import annotations

import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from procmem import (
    EntryStats,
    EntryStatus,
    MemoryLibrary,
    Step,
    TaskSpec,
    Trajectory,
    TrajectoryParseError,
    parse_trajectory,
    serialize_trajectory,
    whitespace_token_count,
)
from conftest import make_entry, make_traj

# ------------------------------------------------------------ token counting


def test_whitespace_token_count():
    assert whitespace_token_count("") == 0
    assert whitespace_token_count("one two  three\nfour") == 4


# ------------------------------------------------------------ canonical text


def test_serialize_line_structure():
    traj = make_traj(actions_obs=(("goto loc-1", "you are at loc-1"), ("finish", "done")))
    text = serialize_trajectory(traj)
    lines = text.split("\n")
    assert len(lines) == 4  # header + 2 steps + reward
    assert lines[0] == "TASK heat-egg heat the egg in the microwave"
    assert lines[1] == "STEP 0 ACT goto loc-1 OBS you are at loc-1"
    assert lines[3] == "REWARD 1.0"


def test_serialize_zero_steps():
    traj = make_traj(actions_obs=(), reward=0.0)
    assert serialize_trajectory(traj).split("\n") == [
        "TASK heat-egg heat the egg in the microwave",
        "REWARD 0.0",
    ]


def test_serialize_rejects_bad_family_and_description():
    traj = make_traj(family_id="two words")
    with pytest.raises(ValueError):
        serialize_trajectory(traj)
    traj = make_traj(description="line one\nline two")
    with pytest.raises(ValueError):
        serialize_trajectory(traj)


_WORD = st.text(alphabet="abcdefghij0123456789", min_size=1, max_size=6)
_PHRASE = st.lists(_WORD, min_size=1, max_size=5).map(" ".join)


@st.composite
def trajectories(draw):
    n_steps = draw(st.integers(0, 10))
    steps = tuple(
        Step(index=i, action=draw(_PHRASE), observation=draw(st.one_of(st.just(""), _PHRASE)))
        for i in range(n_steps)
    )
    task = TaskSpec(
        task_id="",
        description=draw(st.one_of(st.just(""), _PHRASE)),
        family_id=draw(_WORD),
    )
    reward = draw(
        st.floats(min_value=0.0, max_value=1.0, allow_nan=False, allow_infinity=False)
    )
    return Trajectory(traj_id="", task=task, steps=steps, reward=reward)


@settings(max_examples=200)
@given(trajectories())
def test_serialize_parse_round_trip(traj):
    assert parse_trajectory(serialize_trajectory(traj)) == traj


def test_parse_accepts_trailing_newline():
    text = serialize_trajectory(make_traj()) + "\n"
    assert parse_trajectory(text) == parse_trajectory(text.rstrip("\n"))


@pytest.mark.parametrize(
    "text, line_no",
    [
        ("", 1),
        ("STEP 0 ACT x OBS y", 1),
        ("TASK f desc\nSTEP 0 ACT a\nREWARD 1.0", 2),
        ("TASK f desc\nSTEP one ACT a OBS b\nREWARD 1.0", 2),
        ("TASK f desc\nSTEP 1 ACT a OBS b\nREWARD 1.0", 2),
        ("TASK f desc\nGARBAGE\nREWARD 1.0", 2),
        ("TASK f desc\nREWARD not-a-number", 2),
        ("TASK f desc\nREWARD 1.5", 2),
        ("TASK f desc\nREWARD 1.0\nSTEP 0 ACT a OBS b", 3),
        ("TASK f desc", 2),
    ],
)
def test_parse_errors_name_the_line(text, line_no):
    with pytest.raises(TrajectoryParseError) as exc_info:
        parse_trajectory(text)
    assert exc_info.value.line_no == line_no
    assert f"line {line_no}:" in str(exc_info.value)


def test_step_field_validation():
    with pytest.raises(ValueError):
        Step(index=-1, action="a", observation="")
    with pytest.raises(ValueError):
        Step(index=0, action="", observation="")
    with pytest.raises(ValueError):
        Step(index=0, action="x OBS y", observation="")
    with pytest.raises(ValueError):
        Step(index=0, action="a", observation="b\nc")


def test_trajectory_validation():
    with pytest.raises(ValueError):
        make_traj(reward=1.5)
    steps = (Step(index=1, action="a", observation="b"),)
    with pytest.raises(ValueError):
        Trajectory(traj_id="t", task=TaskSpec("t", "d", "f"), steps=steps, reward=1.0)


def test_trajectory_counts():
    traj = make_traj(
        actions_obs=(("goto loc-1", "you are at loc-1"), ("take egg", "you take the egg"))
    )
    assert traj.step_count == 2
    # "goto loc-1"=2 + "you are at loc-1"=4 + "take egg"=2 + "you take the egg"=4
    assert traj.token_count == 12


# ------------------------------------------------------------ library basics


def test_library_init_bounds(emb):
    lib = MemoryLibrary(capacity=100, embed_dim=256)
    assert lib.generation == 0 and lib.entries() == ()
    assert MemoryLibrary(capacity=1, embed_dim=8).capacity == 1
    with pytest.raises(ValueError):
        MemoryLibrary(capacity=0, embed_dim=8)
    with pytest.raises(ValueError):
        MemoryLibrary(capacity=4, embed_dim=0)
    with pytest.raises(ValueError):
        MemoryLibrary(capacity=4, embed_dim=8, generation=-1)


def test_apply_batch_generation_and_order(emb):
    lib = MemoryLibrary(capacity=8, embed_dim=emb.dim)
    e1 = make_entry("b", emb)
    e2 = make_entry("a", emb)
    assert lib.apply_batch(add=[e1, e2]) == 1
    assert lib.generation == 1
    assert [e.entry_id for e in lib.entries()] == ["a", "b"]  # id order
    assert lib.apply_batch() == 2  # empty batch still advances


def test_apply_batch_rejects_duplicates_and_unknown(emb):
    lib = MemoryLibrary(capacity=8, embed_dim=emb.dim)
    lib.apply_batch(add=[make_entry("a", emb)])
    with pytest.raises(ValueError):
        lib.apply_batch(add=[make_entry("a", emb)])
    with pytest.raises(ValueError):
        lib.apply_batch(add=[make_entry("x", emb), make_entry("x", emb)])
    with pytest.raises(ValueError):
        lib.apply_batch(replace_entries=[make_entry("missing", emb)])
    with pytest.raises(ValueError):
        lib.apply_batch(deprecate=["missing"])


def test_apply_batch_dimension_check(emb):
    lib = MemoryLibrary(capacity=8, embed_dim=32)
    with pytest.raises(ValueError):
        lib.apply_batch(add=[make_entry("a", emb)])  # 64-dim keys


def test_apply_batch_atomic_on_failure(emb):
    lib = MemoryLibrary(capacity=2, embed_dim=emb.dim)
    lib.apply_batch(add=[make_entry("a", emb)])
    gen = lib.generation
    # Batch would exceed capacity; nothing about it may stick.
    with pytest.raises(ValueError):
        lib.apply_batch(add=[make_entry("b", emb), make_entry("c", emb)])
    assert lib.generation == gen
    assert [e.entry_id for e in lib.entries()] == ["a"]


def test_capacity_counts_active_only(emb):
    lib = MemoryLibrary(capacity=2, embed_dim=emb.dim)
    lib.apply_batch(add=[make_entry("a", emb), make_entry("b", emb)])
    # At capacity: a plain add must fail, deprecate-and-add in one batch works.
    with pytest.raises(ValueError):
        lib.apply_batch(add=[make_entry("c", emb)])
    lib.apply_batch(add=[make_entry("c", emb)], deprecate=["a"])
    assert lib.get("a").status is EntryStatus.DEPRECATED
    assert lib.active_count() == 2 and len(lib.entries()) == 3


def test_replace_swaps_in_place(emb):
    lib = MemoryLibrary(capacity=4, embed_dim=emb.dim)
    lib.apply_batch(add=[make_entry("a", emb, content="old content")])
    new = make_entry("a", emb, content="new content")
    lib.apply_batch(replace_entries=[new])
    assert lib.get("a").content == "new content"
    assert len(lib.entries()) == 1


def test_note_retrieved_no_generation_bump(emb):
    lib = MemoryLibrary(capacity=4, embed_dim=emb.dim)
    lib.apply_batch(add=[make_entry("a", emb)])
    gen = lib.generation
    lib.note_retrieved(["a"])
    lib.note_retrieved(["a"])
    assert lib.generation == gen
    assert lib.get("a").stats.retrieved_count == 2


def test_snapshot_active_excludes_deprecated(emb):
    lib = MemoryLibrary(capacity=4, embed_dim=emb.dim)
    lib.apply_batch(add=[make_entry("a", emb), make_entry("b", emb)])
    lib.apply_batch(deprecate=["a"])
    generation, active = lib.snapshot_active()
    assert generation == lib.generation
    assert [e.entry_id for e in active] == ["b"]


def test_restore_preserves_generation(emb):
    entries = [make_entry("a", emb), make_entry("b", emb)]
    lib = MemoryLibrary.restore(capacity=4, embed_dim=emb.dim, generation=7, entries=entries)
    assert lib.generation == 7
    assert [e.entry_id for e in lib.entries()] == ["a", "b"]
    with pytest.raises(ValueError):
        MemoryLibrary.restore(capacity=1, embed_dim=emb.dim, generation=0, entries=entries)
    with pytest.raises(ValueError):
        MemoryLibrary.restore(
            capacity=4, embed_dim=emb.dim, generation=0, entries=[entries[0], entries[0]]
        )


def test_help_rate(emb):
    entry = make_entry("a", emb, stats=EntryStats(retrieved_count=0, success_count=0))
    assert entry.help_rate() == 0.0
    entry = make_entry("a", emb, stats=EntryStats(retrieved_count=8, success_count=2))
    assert entry.help_rate() == 0.25


def test_entry_validation(emb):
    with pytest.raises(ValueError):
        make_entry("", emb)
    with pytest.raises(ValueError):
        make_entry("a", emb, key_texts=())
    with pytest.raises(ValueError):
        make_entry("a", emb, content="")


def test_concurrent_batches_keep_generation_consistent(emb):
    lib = MemoryLibrary(capacity=256, embed_dim=emb.dim)
    errors: list[Exception] = []

    def writer(tag: str) -> None:
        try:
            for i in range(20):
                lib.apply_batch(add=[make_entry(f"{tag}-{i}", emb)])
        except Exception as exc:  # surface failures to the main thread
            errors.append(exc)

    threads = [threading.Thread(target=writer, args=(t,)) for t in ("x", "y", "z")]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert lib.generation == 60
    assert len(lib.entries()) == 60
