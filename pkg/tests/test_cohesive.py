import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from ccein.cohesive import (
    ALLOWED,
    CohesiveMind,
    Command,
    Conflict,
    ConflictKind,
    Plan,
    PlanEntry,
    Status,
    Subtask,
    TaskKind,
    TEMPLATES,
    TransitionError,
    allocate,
    detect_conflicts,
    hungarian,
    optimal_matching,
    parse,
    resolve,
)
from ccein.scenario import (
    KIND_CAPABILITIES,
    Capability,
    CellKind,
    Device,
    DeviceKind,
    ScenarioConfig,
    World,
    WorldMap,
    generate,
)
from ccein.semantics import Urgency

import oracles


def open_world(devices, size=8, cells=()):
    m = WorldMap(size, size, tuple(tuple(CellKind.FREE for _ in range(size)) for _ in range(size)))
    for cell, kind in cells:
        m = m.with_cell(cell, kind)
    return World(0, m, tuple(devices))


def dev(i, kind, pos, battery=1000.0, speed=1.0):
    return Device(i, kind, pos, battery, speed)


# -- parsing ------------------------------------------------------------------


def test_victim_rescue_blueprint():
    world = open_world([], cells=[((3, 3), CellKind.VICTIM)])
    task = parse(Command(TaskKind.VICTIM_RESCUE, (3, 3)), world, task_id=0, first_subtask_id=10)
    assert [s.capability for s in task.subtasks] == [
        Capability.AERIAL_SEARCH,
        Capability.ANNOTATION,
        Capability.SUPPLY_DELIVERY,
    ]
    assert [s.id for s in task.subtasks] == [10, 11, 12]
    assert [s.depends for s in task.subtasks] == [(), (10,), (11,)]
    assert all(s.target == (3, 3) and s.status == Status.PENDING for s in task.subtasks)
    assert task.subtasks[0].urgency == Urgency.CRITICAL


def test_selector_miss_gives_empty_task():
    world = open_world([])
    task = parse(Command(TaskKind.ROUTE_CLEAR, (2, 2)), world, task_id=0, first_subtask_id=0)
    assert task.subtasks == [] and task.warning == "no-target"


def test_unknown_kind():
    with pytest.raises(ValueError):
        parse(Command("Dance", (0, 0)), open_world([]), task_id=0, first_subtask_id=0)


def test_same_command_twice_fresh_ids():
    world = open_world([], cells=[((3, 3), CellKind.VICTIM)])
    mind = CohesiveMind(world)
    a = mind.issue(Command(TaskKind.VICTIM_RESCUE, (3, 3)))
    b = mind.issue(Command(TaskKind.VICTIM_RESCUE, (3, 3)))
    assert a.id != b.id
    assert {s.id for s in a.subtasks}.isdisjoint(s.id for s in b.subtasks)
    strip = lambda t: [(s.capability, s.action, len(s.depends)) for s in t.subtasks]  # noqa: E731
    assert strip(a) == strip(b)


def test_templates_are_acyclic_and_coverable():
    every = set().union(*KIND_CAPABILITIES.values())
    for t in TEMPLATES.values():
        assert all(parent < child for child, parent in t.depends)
        assert {s.capability for s in t.slots} <= every


# -- status machine -----------------------------------------------------------


def test_transitions():
    s = Subtask(0, 0, Capability.AERIAL_SEARCH, (0, 0), Urgency.NORMAL, "x")
    with pytest.raises(TransitionError):
        s.transition(Status.ACTIVE)
    with pytest.raises(TransitionError):
        s.transition(Status.ASSIGNED)  # needs a device
    s.transition(Status.ASSIGNED, 3)
    s.transition(Status.ACTIVE)
    s.transition(Status.DONE)
    for new in Status:
        with pytest.raises(TransitionError):
            s.transition(new, 1)  # Done is terminal


def test_allowed_edges_never_leave_done():
    assert not any(old == Status.DONE for old, _ in ALLOWED)


# -- matching -----------------------------------------------------------------


def test_two_by_two_example():
    total, cols = hungarian(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert total == 2.0 and cols == [0, 1]


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 5), extra=st.integers(0, 2), seed=st.integers(0, 10**6))
def test_hungarian_matches_scipy_and_brute_force(n, extra, seed):
    cost = np.random.default_rng(seed).random((n, n + extra)) * 10
    total, cols = hungarian(cost)
    r, c = linear_sum_assignment(cost)
    assert total == pytest.approx(cost[r, c].sum())
    assert total == pytest.approx(oracles.brute_force_assignment(cost.tolist()))
    assert len(set(cols)) == n


def test_matching_leaves_infeasible_rows_unassigned():
    cost = np.array([[1.0, np.inf], [np.inf, np.inf], [np.inf, 4.0]])
    total, match = optimal_matching(cost)
    assert match == {0: 0, 2: 1} and total == 5.0


def test_matching_prefers_more_matches():
    # matching both rows costs 10 + 10 but beats matching one for 1
    _, match = optimal_matching(np.array([[10.0, 1.0], [np.inf, 10.0]]))
    assert match == {0: 0, 1: 1}


def test_matching_tie_break_is_lexicographic():
    _, match = optimal_matching(np.ones((2, 2)))
    assert match == {0: 0, 1: 1}


def _subtasks(caps):
    return [Subtask(i, 0, c, (4, 4), Urgency.NORMAL, "x") for i, c in enumerate(caps)]


def test_allocate_capability_filter():
    world = open_world([dev(0, DeviceKind.ROBOT_DOG, (0, 0))])
    res = allocate(_subtasks([Capability.AERIAL_SEARCH]), world.devices, world)
    assert res.pairs == ()


def test_allocate_single_feasible_pair():
    world = open_world([dev(0, DeviceKind.VEHICLE, (0, 0))])
    res = allocate(_subtasks([Capability.SUPPLY_DELIVERY]), world.devices, world)
    assert res.pairs == ((0, 0),)
    assert res.total_cost == 8.0  # Manhattan distance on an open map at speed 1


def test_allocate_respects_battery_reserve():
    world = open_world([dev(0, DeviceKind.VEHICLE, (0, 0), battery=5.0)])
    res = allocate(_subtasks([Capability.SUPPLY_DELIVERY]), world.devices, world, initial_battery={0: 100.0})
    assert res.pairs == ()


def test_allocate_cost_override_matches_brute_force():
    rng = np.random.default_rng(0)
    devices = [dev(i, DeviceKind.DRONE, (0, 0)) for i in range(5)]
    world = open_world(devices)
    for _ in range(20):
        cost = rng.random((5, 5))
        res = allocate(_subtasks([Capability.AERIAL_SEARCH] * 5), devices, world, cost_override=cost)
        assert res.total_cost == oracles.brute_force_assignment(cost.tolist())


def test_allocate_shape_check():
    world = open_world([dev(0, DeviceKind.DRONE, (0, 0))])
    with pytest.raises(ValueError):
        allocate(_subtasks([Capability.AERIAL_SEARCH]), world.devices, world, cost_override=np.ones((2, 2)))


# -- conflicts ----------------------------------------------------------------


def corridor_plan(urgency_a=Urgency.CRITICAL, urgency_b=Urgency.NORMAL):
    """Two vehicles approach each other along a row and meet at (3, 0) on tick 3."""
    a = [(t, (t, 0)) for t in range(1, 6)]
    b = [(t, (6 - t, 0)) for t in range(1, 6)]
    return Plan.build(
        paths={0: a, 1: b},
        kinds={0: DeviceKind.VEHICLE, 1: DeviceKind.VEHICLE},
        urgency={0: urgency_a, 1: urgency_b},
    )


def test_empty_plan_has_no_conflicts():
    assert detect_conflicts(Plan()) == []


def test_head_on_gives_one_spatial_conflict():
    plan = corridor_plan()
    found = detect_conflicts(plan)
    assert found == [Conflict(ConflictKind.SPATIAL, tick=3, cell=(3, 0), devices=(0, 1))]


def test_drones_never_conflict():
    plan = Plan.build(paths={0: [(1, (1, 1))], 1: [(1, (1, 1))]}, kinds={0: DeviceKind.DRONE, 1: DeviceKind.VEHICLE})
    assert detect_conflicts(plan) == []


def test_spatial_resolution_priority():
    plan = corridor_plan(Urgency.NORMAL, Urgency.CRITICAL)
    out = resolve(detect_conflicts(plan), plan)
    assert out.path(1) == plan.path(1)  # Critical device proceeds
    assert out.path(0)[:2] == plan.path(0)[:2] and out.path(0)[2] == (4, (3, 0))


def test_spatial_tie_goes_to_lower_id():
    plan = corridor_plan(Urgency.NORMAL, Urgency.NORMAL)
    out = resolve(detect_conflicts(plan), plan)
    assert out.path(0) == plan.path(0) and out.path(1) != plan.path(1)


def test_duplicate_keeps_cheaper_assignee():
    plan = Plan.build([PlanEntry(7, 0, 5.0), PlanEntry(7, 1, 3.0)])
    found = detect_conflicts(plan)
    assert found == [Conflict(ConflictKind.DUPLICATE, devices=(0, 1), subtask=7)]
    assert resolve(found, plan).entries == (PlanEntry(7, 1, 3.0),)


def test_dependency_violation_demotes_child():
    plan = Plan.build(
        [PlanEntry(2, 0)], statuses={1: Status.PENDING, 2: Status.ACTIVE}, depends={2: (1,)}
    )
    found = detect_conflicts(plan)
    assert found == [Conflict(ConflictKind.DEPENDENCY, subtask=2)]
    out = resolve(found, plan)
    assert dict(out.statuses)[2] == Status.PENDING and out.entries == ()
    assert detect_conflicts(out) == []


@pytest.mark.parametrize(
    "plan",
    [
        corridor_plan(),
        Plan.build([PlanEntry(7, 0, 5.0), PlanEntry(7, 1, 3.0), PlanEntry(7, 2, 3.0)]),
        Plan.build([PlanEntry(2, 0)], statuses={1: Status.ACTIVE, 2: Status.ACTIVE}, depends={2: (1,)}),
    ],
)
def test_resolve_is_idempotent(plan):
    c = detect_conflicts(plan)
    once = resolve(c, plan)
    assert resolve(c, once) == once


# -- coordinator --------------------------------------------------------------


def test_replan_moves_work_to_peer():
    devices = [dev(0, DeviceKind.VEHICLE, (0, 0)), dev(1, DeviceKind.VEHICLE, (7, 7))]
    world = open_world(devices)
    mind = CohesiveMind(world)
    task = mind.issue(Command(TaskKind.SUPPLY_DELIVERY, (1, 1)))
    sid = task.subtasks[0].id
    mind.allocate(world.devices, 0)
    assert mind.subtasks[sid].assignee == 0
    mind.activate(0, 0)
    assert mind.subtasks[sid].status == Status.ACTIVE
    failed = (devices[0].moved((0, 0), 0.0), devices[1])
    mind.replan(failed, 5, failed=[0])
    assert mind.subtasks[sid].assignee == 1 and mind.subtasks[sid].status == Status.ASSIGNED


def test_replan_idle_failure_changes_nothing():
    devices = [dev(0, DeviceKind.VEHICLE, (0, 0)), dev(1, DeviceKind.DRONE, (7, 7))]
    world = open_world(devices)
    mind = CohesiveMind(world)
    mind.issue(Command(TaskKind.SUPPLY_DELIVERY, (1, 1)))
    mind.allocate(world.devices, 0)
    before = {s.id: (s.status, s.assignee) for s in mind.subtasks.values()}
    mind.replan((devices[0], devices[1].moved((7, 7), 0.0)), 1, failed=[1])
    assert {s.id: (s.status, s.assignee) for s in mind.subtasks.values()} == before


def test_all_devices_failed_leaves_everything_pending():
    devices = [dev(0, DeviceKind.VEHICLE, (0, 0)), dev(1, DeviceKind.VEHICLE, (7, 7))]
    mind = CohesiveMind(open_world(devices))
    mind.issue(Command(TaskKind.SUPPLY_DELIVERY, (1, 1)))
    mind.allocate(devices, 0)
    dead = tuple(d.moved(d.position, 0.0) for d in devices)
    res = mind.replan(dead, 1, failed=[0, 1])
    assert res.pairs == ()
    assert all(s.status == Status.PENDING for s in mind.subtasks.values())


def test_done_work_is_never_repeated():
    devices = [dev(0, DeviceKind.VEHICLE, (0, 0)), dev(1, DeviceKind.VEHICLE, (7, 7))]
    mind = CohesiveMind(open_world(devices))
    sid = mind.issue(Command(TaskKind.SUPPLY_DELIVERY, (1, 1))).subtasks[0].id
    mind.allocate(devices, 0)
    mind.activate(0, 0)
    mind.complete(sid, 3)
    mind.replan(devices, 4, failed=[0])
    assert mind.subtasks[sid].status == Status.DONE


def test_deadline_expiry_returns_to_pending():
    devices = [dev(0, DeviceKind.VEHICLE, (0, 0))]
    mind = CohesiveMind(open_world(devices), subtask_timeout=5)
    sid = mind.issue(Command(TaskKind.SUPPLY_DELIVERY, (1, 1))).subtasks[0].id
    mind.allocate(devices, 0)
    mind.activate(0, 2)
    assert mind.subtasks[sid].deadline == 7
    assert mind.expire(7) == []
    assert mind.expire(8) == [sid]
    assert mind.subtasks[sid].status == Status.PENDING
    edges = [(t.old, t.new) for t in mind.log]
    assert (Status.ACTIVE, Status.FAILED) in edges and (Status.FAILED, Status.PENDING) in edges


def test_dependencies_gate_readiness():
    world = generate(ScenarioConfig(seed=1))
    mind = CohesiveMind(world)
    task = mind.issue(Command(TaskKind.VICTIM_RESCUE, world.victims[0]))
    assert [s.id for s in mind.ready()] == [task.subtasks[0].id]


def test_random_allocations_respect_capabilities():
    world = generate(ScenarioConfig(seed=4))
    mind = CohesiveMind(world)
    for v in world.victims[:5]:
        mind.issue(Command(TaskKind.VICTIM_RESCUE, v))
    for cell in itertools.islice(world.map.cells_of(CellKind.OBSTACLE), 3):
        mind.issue(Command(TaskKind.ROUTE_CLEAR, cell))
    res = mind.allocate(world.devices, 0)
    assert res.pairs
    for sid, did in res.pairs:
        assert mind.subtasks[sid].capability in world.device(did).capabilities
    assert len({did for _, did in res.pairs}) == len(res.pairs)
