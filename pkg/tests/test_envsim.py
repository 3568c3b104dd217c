"""KeyedRooms environment, scripted agents, and their step-count arithmetic.

The agents are deterministic at p_err=0, so expected step counts can be
derived by hand: a scanning agent pays goto+inspect per location up to the
object (2p), one take, the sum of 1-based vocabulary positions per required
verb (G), and one finish, for 2p + G + 2 total. An informed agent with the
right hint at rank r pays 2(r-1) for dud locations plus goto+inspect+take,
m procedure actions, and one finish: 2(r-1) + m + 4.
"""

import random

import pytest

from procmem import (
    AgentProfile,
    EnvError,
    KeyedRooms,
    TaskSpec,
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
from procmem.envsim import (
    DESCRIPTION_TEMPLATES,
    PROCEDURE_VOCAB,
    Family,
    family_location,
    parse_hints,
    scan_order,
    truncate_to_token_budget,
)


def guess_cost(procedure):
    return sum(PROCEDURE_VOCAB.index(v) + 1 for v in procedure)


def loc_rank(location):
    return int(location.split("-")[1])


def script(location, actions, family="heat-egg"):
    return f"SCRIPT family={family}\nLOCATION {location}\nACTIONS {','.join(actions)}\nNOTE n"


# ------------------------------------------------------------ env mechanics


def test_episode_walkthrough():
    env = KeyedRooms(demo_world(), demo_task())
    assert env.step("goto loc-7") == ("you are at loc-7", False)
    assert env.step("inspect") == ("you see egg", False)
    assert env.step("take egg") == ("you take the egg", False)
    assert env.step("open egg") == ("you open the egg", False)
    assert env.step("heat egg") == ("you heat the egg", False)
    assert env.step("place egg") == ("you place the egg", False)
    obs, done = env.step("finish")
    assert (obs, done) == ("done", True)
    assert env.finished_ok and env.reward() == 1.0
    assert env.steps_used == 7


@pytest.mark.parametrize(
    "setup,action",
    [
        ([], "take egg"),  # not at the object
        ([], "open egg"),  # verb before acquiring
        (["goto loc-7"], "take mug"),  # wrong object name
        (["goto loc-7", "inspect", "take egg"], "heat egg"),  # out of order
        (["goto loc-7", "inspect", "take egg"], "take egg"),  # double take
        ([], "goto loc-99"),  # unknown location
        ([], "goto"),  # malformed
        ([], ""),  # empty action
    ],
)
def test_rejected_actions(setup, action):
    env = KeyedRooms(demo_world(), demo_task())
    for a in setup:
        env.step(a)
    obs, done = env.step(action)
    assert obs == "nothing happens"
    assert done is False


def test_inspect_wrong_room_says_nothing_here():
    env = KeyedRooms(demo_world(), demo_task())
    assert env.step("inspect")[0] == "nothing here"  # not in a room yet
    env.step("goto loc-3")
    assert env.step("inspect")[0] == "nothing here"


def test_finish_without_progress_fails():
    env = KeyedRooms(demo_world(), demo_task())
    obs, done = env.step("finish")
    assert done is True
    assert env.reward() == 0.0


def test_step_after_done_raises():
    env = KeyedRooms(demo_world(), demo_task())
    env.step("finish")
    with pytest.raises(EnvError):
        env.step("inspect")


def test_reward_before_done_raises():
    env = KeyedRooms(demo_world(), demo_task())
    with pytest.raises(EnvError):
        env.reward()


def test_budget_exhaustion_ends_episode():
    env = KeyedRooms(demo_world(), demo_task(), budget=3)
    env.step("goto loc-1")
    env.step("inspect")
    obs, done = env.step("goto loc-2")
    assert done is True
    assert env.steps_used == 3
    assert env.reward() == 0.0


def test_finish_on_final_budget_step_counts():
    # finish lands exactly on the last allowed step and still succeeds.
    env = KeyedRooms(demo_world(), demo_task(), budget=7)
    for a in ("goto loc-7", "inspect", "take egg", "open egg", "heat egg", "place egg"):
        env.step(a)
    obs, done = env.step("finish")
    assert done and env.finished_ok
    assert env.reward() == 1.0
    assert env.steps_used == 7


def test_unknown_family_raises():
    task = TaskSpec(
        task_id="t", description="x", family_id="no-such", metadata={"stages": "2"}
    )
    with pytest.raises(EnvError):
        KeyedRooms(demo_world(), task)


def test_budget_validation():
    with pytest.raises(ValueError):
        KeyedRooms(demo_world(), demo_task(), budget=0)


# --------------------------------------------------------------- scan order


def test_scan_order_covers_numeric_range_with_gaps():
    world = WorldConfig(
        world_id="w",
        seed=0,
        locations=("loc-2", "loc-5"),
        families=(
            Family(family_id="open-egg", obj="egg", procedure=("open", "heat"), location="loc-5"),
        ),
    )
    assert scan_order(world) == ("loc-1", "loc-2", "loc-3", "loc-4", "loc-5")


# -------------------------------------------------------------------- drift


def test_family_location_stable_and_home_at_group_zero():
    world = default_world(seed=3, drift_prob=0.15)
    for fam in world.families:
        assert family_location(world, fam.family_id, 0) == fam.location
        once = family_location(world, fam.family_id, 4)
        again = family_location(world, fam.family_id, 4)
        assert once == again
        assert once in world.locations


def test_no_drift_never_moves():
    world = default_world(seed=3, drift_prob=0.0)
    fam = world.families[0]
    for g in range(6):
        assert family_location(world, fam.family_id, g) == fam.location


def test_certain_drift_always_moves():
    world = default_world(seed=3, drift_prob=1.0)
    fam = world.families[0]
    prev = fam.location
    positions = [prev]
    # Replaying the per-family stream: each group moves somewhere else.
    rng = random.Random(f"{world.seed}:drift:{fam.family_id}")
    for g in range(1, 5):
        rng.random()
        prev = rng.choice([c for c in world.locations if c != prev])
        positions.append(prev)
        assert family_location(world, fam.family_id, g) == prev
    assert len(set(positions)) > 1


def test_negative_group_rejected():
    world = default_world(seed=0)
    with pytest.raises(ValueError):
        family_location(world, world.families[0].family_id, -1)


# ------------------------------------------------------------- spawn_tasks


def test_spawn_tasks_shape_and_metadata():
    world = default_world(seed=1)
    groups = spawn_tasks(world, 80, group_count=4, id_prefix="run")
    assert [len(g) for g in groups] == [20, 20, 20, 20]
    flat = [t for g in groups for t in g]
    # Round-robin keeps the family mix uniform.
    per_family = {f.family_id: 0 for f in world.families}
    for t in flat:
        per_family[t.family_id] += 1
    assert set(per_family.values()) == {10}
    for g_idx, group in enumerate(groups):
        for t in group:
            fam = world.family(t.family_id)
            assert t.metadata["stages"] == str(len(fam.procedure))
            assert t.metadata["group"] == str(g_idx)
            assert t.task_id.startswith(f"run-g{g_idx}-")
            assert t.env_id == world.world_id
            assert fam.obj in t.description
            assert fam.procedure[0] in t.description


def test_spawn_tasks_phrasing_cycles_per_pass():
    world = default_world(seed=1)
    flat = spawn_tasks(world, 32, group_count=1)[0]
    n_fam = len(world.families)
    for i, task in enumerate(flat):
        fam = world.family(task.family_id)
        tpl = DESCRIPTION_TEMPLATES[(i // n_fam) % len(DESCRIPTION_TEMPLATES)]
        assert task.description == tpl.format(obj=fam.obj, verb=fam.procedure[0])


def test_spawn_tasks_fixed_template():
    world = default_world(seed=1)
    flat = spawn_tasks(world, 16, template=2)[0]
    for task in flat:
        fam = world.family(task.family_id)
        assert task.description == DESCRIPTION_TEMPLATES[2].format(
            obj=fam.obj, verb=fam.procedure[0]
        )


def test_spawn_tasks_validation():
    world = default_world(seed=1)
    with pytest.raises(ValueError):
        spawn_tasks(world, 3, group_count=4)
    with pytest.raises(ValueError):
        spawn_tasks(world, 4, group_count=0)


# ------------------------------------------------------- memory-free agent


def test_memory_free_demo_exact_steps():
    # Object at loc-7, procedure (open, heat, place): 2*7 + (1+2+6) + 2 = 25.
    result = run_memory_free(
        KeyedRooms(demo_world(), demo_task()), random.Random(0), traj_id="demo"
    )
    traj = result.trajectory
    assert traj.reward == 1.0
    assert len(traj.steps) == 25
    assert result.context_tokens == 0
    assert result.token_proxy == traj.token_count


def test_memory_free_formula_across_default_world():
    world = default_world(seed=5)
    for task in spawn_tasks(world, 8, template=0)[0]:
        fam = world.family(task.family_id)
        p = loc_rank(fam.location)
        expected = 2 * p + guess_cost(fam.procedure) + 2
        env = KeyedRooms(world, task, budget=200)
        result = run_memory_free(env, random.Random(1))
        assert len(result.trajectory.steps) == expected, fam.family_id
        assert result.trajectory.reward == 1.0


def test_memory_free_budget_death():
    # 25 steps needed; the default demo budget (8 locations world -> 30) is
    # enough, a budget of 24 is one short.
    env = KeyedRooms(demo_world(), demo_task(), budget=24)
    result = run_memory_free(env, random.Random(0))
    assert result.trajectory.reward == 0.0
    assert len(result.trajectory.steps) == 24


def test_memory_free_slips_add_noops_deterministically():
    base = run_memory_free(KeyedRooms(demo_world(), demo_task()), random.Random(7))
    slip_a = run_memory_free(
        KeyedRooms(demo_world(), demo_task(), budget=60),
        random.Random(7),
        AgentProfile(p_err=0.4),
    )
    slip_b = run_memory_free(
        KeyedRooms(demo_world(), demo_task(), budget=60),
        random.Random(7),
        AgentProfile(p_err=0.4),
    )
    assert [s.action for s in slip_a.trajectory.steps] == [
        s.action for s in slip_b.trajectory.steps
    ]
    noops = [s for s in slip_a.trajectory.steps if s.action == "noop"]
    assert noops, "p_err=0.4 over 9 attempts should slip at least once for this seed"
    assert len(slip_a.trajectory.steps) == len(base.trajectory.steps) + len(noops)
    assert slip_a.trajectory.reward == 1.0


# --------------------------------------------------------- informed agent


def test_informed_direct_hit_exact_steps():
    # Correct hint at rank 1: 3 travel steps + 3 actions + finish = 7.
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()),
        [script("loc-7", ("open", "heat", "place"))],
        random.Random(0),
    )
    assert result.trajectory.reward == 1.0
    assert len(result.trajectory.steps) == 7


@pytest.mark.parametrize("rank", [1, 2, 3, 4])
def test_informed_rank_formula(rank):
    # Dud locations ahead of the true hint cost goto+inspect each.
    duds = [script(f"loc-{i}", ("toggle", "slice")) for i in range(1, rank)]
    contents = duds + [script("loc-7", ("open", "heat", "place"))]
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()), contents, random.Random(0)
    )
    assert result.trajectory.reward == 1.0
    assert len(result.trajectory.steps) == 2 * (rank - 1) + 3 + 4


def test_informed_partial_hint_recovers():
    # Hint gives the location and the first verb only. Remaining stages are
    # guessed: heat costs 2 attempts, place costs 6, so
    # 3 travel + 1 hinted + 8 guessed + finish = 13.
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()),
        [script("loc-7", ("open",))],
        random.Random(0),
    )
    assert result.trajectory.reward == 1.0
    assert len(result.trajectory.steps) == 13


def test_informed_overlong_hint_finishes_early():
    # Four hinted actions for three stages: the fourth is rejected, but the
    # agent knows the stage count and finishes anyway. 3 + 3 + 1 + 1 = 8.
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()),
        [script("loc-7", ("open", "heat", "place", "toggle"))],
        random.Random(0),
    )
    assert result.trajectory.reward == 1.0
    assert len(result.trajectory.steps) == 8


def test_informed_bad_verb_falls_back():
    # Right location, wrong first verb: the hint dies on the rejection, then
    # guessing covers all 3 stages (1+2+6 = 9): 3 + 1 + 9 + 1 = 14.
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()),
        [script("loc-7", ("cool", "heat", "place"))],
        random.Random(0),
    )
    assert result.trajectory.reward == 1.0
    assert len(result.trajectory.steps) == 14


def test_informed_wrong_location_scan_skips_visited():
    # The dud location is not rescanned during fallback.
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()),
        [script("loc-3", ("open", "heat", "place"))],
        random.Random(0),
    )
    traj = result.trajectory
    assert traj.reward == 1.0
    gotos = [s.action for s in traj.steps if s.action.startswith("goto ")]
    assert gotos.count("goto loc-3") == 1
    # Hint miss costs 2; scan then covers 6 remaining locations up to loc-7
    # (12), take (1), guesses (9), finish (1).
    assert len(traj.steps) == 2 + 12 + 1 + 9 + 1


def test_informed_no_usable_memory_equals_memory_free():
    free = run_memory_free(KeyedRooms(demo_world(), demo_task()), random.Random(0))
    informed = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()), ["garbled noise\nnothing here"], random.Random(0)
    )
    assert [s.action for s in informed.trajectory.steps] == [
        s.action for s in free.trajectory.steps
    ]
    assert informed.context_tokens == 4


def test_informed_reads_verbatim_trajectories():
    from procmem import serialize_trajectory

    success = run_memory_free(
        KeyedRooms(demo_world(), demo_task()), random.Random(0), traj_id="demo"
    )
    text = serialize_trajectory(success.trajectory)
    hints = parse_hints(text)
    assert len(hints) == 1
    assert hints[0].location == "loc-7"
    assert hints[0].actions == ("open", "heat", "place")
    assert hints[0].source == "verbatim"
    replay = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()), [text], random.Random(0)
    )
    assert replay.trajectory.reward == 1.0
    assert len(replay.trajectory.steps) == 7


def test_informed_context_budget_can_destroy_hint():
    content = script("loc-7", ("open", "heat", "place"))
    tight = AgentProfile(context_budget=4)  # keeps only the SCRIPT line's tokens
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()), [content], random.Random(0), tight
    )
    assert result.context_tokens <= 4
    # No usable hint: behaves like the scanning agent.
    assert len(result.trajectory.steps) == 25


def test_informed_token_proxy_counts_context():
    content = script("loc-7", ("open", "heat", "place"))
    result = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()), [content], random.Random(0)
    )
    assert result.context_tokens == len(content.split())
    assert result.token_proxy == result.context_tokens + result.trajectory.token_count


def test_informed_hint_following_ignores_p_err():
    slippy = AgentProfile(p_err=0.6)
    a = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()),
        [script("loc-7", ("open", "heat", "place"))],
        random.Random(1),
        slippy,
    )
    b = run_memory_informed(
        KeyedRooms(demo_world(), demo_task()),
        [script("loc-7", ("open", "heat", "place"))],
        random.Random(99),
        slippy,
    )
    assert len(a.trajectory.steps) == len(b.trajectory.steps) == 7


# ----------------------------------------------------------- replay parity


def test_trajectory_replays_to_same_observations():
    world = default_world(seed=11)
    task = spawn_tasks(world, 8, template=0)[0][5]
    recorded = run_memory_free(KeyedRooms(world, task, budget=200), random.Random(2))
    env = KeyedRooms(world, task, budget=200)
    for step in recorded.trajectory.steps:
        obs, _ = env.step(step.action)
        assert obs == step.observation
    assert env.reward() == recorded.trajectory.reward


# ------------------------------------------------------------ world config


def test_default_world_layout():
    world = default_world(seed=4)
    assert world.world_id == "keyedrooms-4"
    assert len(world.locations) == 10
    assert len(world.families) == 8
    lengths = sorted(len(f.procedure) for f in world.families)
    assert lengths == [2, 2, 3, 3, 4, 4, 5, 5]
    # Heavier-to-guess families sit farther out: walking inward from the
    # farthest location, guess cost never increases.
    by_distance = sorted(world.families, key=lambda f: -loc_rank(f.location))
    costs = [guess_cost(f.procedure) for f in by_distance]
    assert costs == sorted(costs, reverse=True)
    assert default_world(seed=4) == world
    assert default_world(seed=5) != world


def test_world_dict_round_trip():
    world = default_world(seed=9, drift_prob=0.15)
    assert world_from_dict(world_to_dict(world)) == world


def test_world_from_dict_int_locations_shorthand():
    world = world_from_dict(
        {
            "seed": 1,
            "locations": 4,
            "families": [
                {
                    "family_id": "open-egg",
                    "obj": "egg",
                    "procedure": ["open", "heat"],
                    "location": "loc-3",
                }
            ],
        }
    )
    assert world.locations == ("loc-1", "loc-2", "loc-3", "loc-4")
    assert world.world_id == "keyedrooms-1"
    assert world.step_budget == 30


@pytest.mark.parametrize(
    "mutate,fragment",
    [
        (lambda d: d.update(bogus=1), "unknown world config keys: bogus"),
        (lambda d: d.pop("seed"), "missing key: seed"),
        (lambda d: d.update(locations=1), "locations count must be >= 2"),
        (lambda d: d["families"][0].pop("obj"), "family 0 missing key: obj"),
        (
            lambda d: d["families"][0].update(procedure=["open"]),
            "family 0: family open-egg procedure length must be 2-5",
        ),
        (lambda d: d.update(drift_prob=1.5), "drift_prob must be within [0, 1]"),
        (lambda d: d.update(step_budget=0), "step_budget must be >= 1"),
    ],
)
def test_world_from_dict_errors(mutate, fragment):
    data = {
        "seed": 1,
        "locations": 4,
        "families": [
            {
                "family_id": "open-egg",
                "obj": "egg",
                "procedure": ["open", "heat"],
                "location": "loc-3",
            }
        ],
    }
    mutate(data)
    with pytest.raises(EnvError) as err:
        world_from_dict(data)
    assert fragment in str(err.value)


def test_family_validation():
    with pytest.raises(ValueError):
        Family(family_id="two words", obj="egg", procedure=("open", "heat"), location="loc-1")
    with pytest.raises(ValueError):
        Family(family_id="f", obj="egg", procedure=("open", "explode"), location="loc-1")
    with pytest.raises(ValueError):
        Family(family_id="f", obj="egg", procedure=("open", "heat"), location="room-1")


def test_world_validation():
    fam = Family(family_id="f", obj="egg", procedure=("open", "heat"), location="loc-1")
    with pytest.raises(ValueError):
        WorldConfig(world_id="w", seed=0, locations=("loc-1",), families=(fam,))
    with pytest.raises(ValueError):
        WorldConfig(
            world_id="w", seed=0, locations=("loc-1", "loc-1"), families=(fam,)
        )
    with pytest.raises(ValueError):
        WorldConfig(
            world_id="w",
            seed=0,
            locations=("loc-1", "loc-2"),
            families=(fam, fam),
        )
    bad_home = Family(family_id="g", obj="mug", procedure=("open", "heat"), location="loc-9")
    with pytest.raises(ValueError):
        WorldConfig(world_id="w", seed=0, locations=("loc-1", "loc-2"), families=(bad_home,))


def test_agent_profile_validation():
    with pytest.raises(ValueError):
        AgentProfile(p_err=1.0)
    with pytest.raises(ValueError):
        AgentProfile(context_budget=-1)


# -------------------------------------------------------------- truncation


def test_truncate_none_budget_is_identity():
    text = "a b c\nd e f"
    assert truncate_to_token_budget(text, None) == text


def test_truncate_exact_fit_keeps_all():
    assert truncate_to_token_budget("a b\nc d", 4) == "a b\nc d"


def test_truncate_partial_line_keeps_leading_tokens():
    assert truncate_to_token_budget("a b c\nd e f", 4) == "a b c\nd"
    assert truncate_to_token_budget("a b c\nd e f", 2) == "a b"


def test_truncate_zero_budget_empty():
    assert truncate_to_token_budget("a b c", 0) == ""


def test_truncate_never_splits_tokens():
    out = truncate_to_token_budget("alpha beta gamma", 2)
    assert out == "alpha beta"


# ------------------------------------------------------------- parse_hints


def test_parse_hints_script_and_order():
    text = "\n".join(
        [
            script("loc-2", ("open", "heat")),
            script("loc-5", ("toggle",)),
        ]
    )
    hints = parse_hints(text)
    assert [(h.location, h.actions) for h in hints] == [
        ("loc-2", ("open", "heat")),
        ("loc-5", ("toggle",)),
    ]
    assert all(h.source == "script" for h in hints)


def test_parse_hints_rejects_mangled_blocks():
    assert parse_hints("SCRIPT family=f\nACTIONS open") == []  # no location
    assert parse_hints("SCRIPT family=f\nLOCATION loc-2\nACTIONS") == []  # malformed
    assert parse_hints("SCRIPT family=f\nLOCATION loc-2") == []  # no actions
    # Verbatim block cut before REWARD yields nothing.
    assert (
        parse_hints("TASK f do it\nSTEP 0 ACT goto loc-2 OBS you are at loc-2")
        == []
    )


def test_parse_hints_truncated_script_still_safe():
    full = script("loc-7", ("open", "heat", "place"))
    cut = truncate_to_token_budget(full, 4)
    assert parse_hints(cut) == []
