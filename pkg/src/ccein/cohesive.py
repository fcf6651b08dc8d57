"""Central coordinator: task templates, allocation, conflicts and re-planning."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .scenario import GROUND_KINDS, PASSABLE, Capability, CellKind, Device, DeviceKind, World, bfs_distances
from .semantics import Urgency

log = logging.getLogger(__name__)

Cell = tuple[int, int]
INF = math.inf


class TaskKind(str, enum.Enum):
    AREA_SEARCH = "AreaSearch"
    ROUTE_CLEAR = "RouteClear"
    SUPPLY_DELIVERY = "SupplyDelivery"
    CLOSE_INSPECT = "CloseInspect"
    VICTIM_RESCUE = "VictimRescue"


class Status(str, enum.Enum):
    PENDING = "Pending"
    ASSIGNED = "Assigned"
    ACTIVE = "Active"
    DONE = "Done"
    FAILED = "Failed"


ALLOWED = {
    (Status.PENDING, Status.ASSIGNED),
    (Status.ASSIGNED, Status.ACTIVE),
    (Status.ACTIVE, Status.DONE),
    (Status.ACTIVE, Status.FAILED),
    (Status.FAILED, Status.PENDING),
    # Reverts used by re-planning and dependency demotion.
    (Status.ASSIGNED, Status.PENDING),
    (Status.ACTIVE, Status.PENDING),
}


class TransitionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Slot:
    capability: Capability
    selector: str  # which cells the command target must be
    urgency: Urgency
    action: str


@dataclass(frozen=True)
class TaskTemplate:
    kind: TaskKind
    slots: tuple[Slot, ...]
    depends: tuple[tuple[int, int], ...] = ()  # (child slot, parent slot)

    def __post_init__(self):
        for child, parent in self.depends:
            if not parent < child < len(self.slots):
                raise ValueError("dependencies must point to earlier slots")


TEMPLATES: dict[TaskKind, TaskTemplate] = {
    TaskKind.VICTIM_RESCUE: TaskTemplate(
        TaskKind.VICTIM_RESCUE,
        (
            Slot(Capability.AERIAL_SEARCH, "victim", Urgency.CRITICAL, "locate"),
            Slot(Capability.ANNOTATION, "victim", Urgency.NORMAL, "annotate"),
            Slot(Capability.SUPPLY_DELIVERY, "victim", Urgency.NORMAL, "deliver"),
        ),
        ((1, 0), (2, 1)),
    ),
    TaskKind.AREA_SEARCH: TaskTemplate(
        TaskKind.AREA_SEARCH, (Slot(Capability.AERIAL_SEARCH, "any", Urgency.NORMAL, "survey"),)
    ),
    TaskKind.ROUTE_CLEAR: TaskTemplate(
        TaskKind.ROUTE_CLEAR,
        (
            Slot(Capability.PATH_SEARCH, "obstacle", Urgency.NORMAL, "scout"),
            Slot(Capability.OBSTACLE_CLEAR, "obstacle", Urgency.NORMAL, "clear"),
        ),
        ((1, 0),),
    ),
    TaskKind.SUPPLY_DELIVERY: TaskTemplate(
        TaskKind.SUPPLY_DELIVERY, (Slot(Capability.SUPPLY_DELIVERY, "passable", Urgency.NORMAL, "deliver"),)
    ),
    TaskKind.CLOSE_INSPECT: TaskTemplate(
        TaskKind.CLOSE_INSPECT,
        (
            Slot(Capability.CLOSE_RANGE_SEARCH, "any", Urgency.NORMAL, "inspect"),
            Slot(Capability.ANNOTATION, "any", Urgency.NORMAL, "annotate"),
        ),
        ((1, 0),),
    ),
}


def _selector_matches(selector: str, world: World, cell: Cell) -> bool:
    if not world.map.inside(cell):
        return False
    kind = world.map[cell]
    if selector == "victim":
        return kind == CellKind.VICTIM
    if selector == "obstacle":
        return kind == CellKind.OBSTACLE
    if selector == "passable":
        return kind in PASSABLE[DeviceKind.VEHICLE]
    return True


@dataclass(frozen=True)
class Command:
    kind: TaskKind
    target: Cell
    tick: int = 0


@dataclass
class Subtask:
    id: int
    parent: int
    capability: Capability
    target: Cell
    urgency: Urgency
    action: str
    depends: tuple[int, ...] = ()
    status: Status = Status.PENDING
    assignee: int | None = None
    deadline: int | None = None

    def transition(self, new: Status, assignee: int | None = None) -> None:
        if (self.status, new) not in ALLOWED:
            raise TransitionError(f"subtask {self.id}: {self.status.value} -> {new.value} not allowed")
        if new == Status.ASSIGNED and assignee is None:
            raise TransitionError("assignment needs a device")
        self.status = new
        if new == Status.ASSIGNED:
            self.assignee = assignee
        elif new in (Status.PENDING, Status.FAILED):
            self.assignee = None
            self.deadline = None


@dataclass
class Task:
    id: int
    kind: TaskKind
    target: Cell
    subtasks: list[Subtask]
    warning: str | None = None
    issued: int = 0

    @property
    def done(self) -> bool:
        return bool(self.subtasks) and all(s.status == Status.DONE for s in self.subtasks)


def parse(command: Command, world: World, *, task_id: int, first_subtask_id: int) -> Task:
    """Instantiate the template for ``command``; ids are supplied by the caller."""
    try:
        template = TEMPLATES[TaskKind(command.kind)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown task kind {command.kind!r}") from None
    if not all(_selector_matches(s.selector, world, command.target) for s in template.slots):
        log.warning("%s at %s matches nothing", template.kind.value, command.target)
        return Task(task_id, template.kind, command.target, [], "no-target", command.tick)
    ids = [first_subtask_id + i for i in range(len(template.slots))]
    deps: dict[int, list[int]] = {}
    for child, parent in template.depends:
        deps.setdefault(child, []).append(ids[parent])
    subtasks = [
        Subtask(ids[i], task_id, slot.capability, command.target, slot.urgency, slot.action, tuple(deps.get(i, ())))
        for i, slot in enumerate(template.slots)
    ]
    warning = "unreachable" if command.target in world.unreachable else None
    return Task(task_id, template.kind, command.target, subtasks, warning, command.tick)


# -- allocation ---------------------------------------------------------------


def hungarian(cost: np.ndarray) -> tuple[float, list[int]]:
    """Min-cost assignment of every row of an n x m matrix (n <= m).

    Shortest augmenting path with potentials; returns (total, column per row).
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n > m:
        raise ValueError("more rows than columns")
    if n == 0:
        return 0.0, []
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=int)  # column -> row (1-based, 0 = free)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        way = np.zeros(m + 1, dtype=int)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.flatnonzero(used)
            u[match[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = [0] * n
    for j in range(1, m + 1):
        if match[j]:
            cols[match[j] - 1] = j - 1
    total = float(sum(cost[i, cols[i]] for i in range(n)))
    return total, cols


def _solve(cost: np.ndarray) -> float:
    """Optimal total where every row may also stay unassigned at cost ``big``."""
    n, m = cost.shape
    if n == 0 or m == 0:
        return 0.0
    if n <= m:
        return hungarian(cost)[0]
    return hungarian(cost.T)[0]


def optimal_matching(cost: np.ndarray) -> tuple[float, dict[int, int]]:
    """Minimum-cost matching over finite entries, maximising the matched count first.

    Among optimal matchings the lexicographically smallest (row, column) pairs
    win. Infinite entries are never matched.
    """
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    finite = np.isfinite(cost)
    if n == 0 or m == 0 or not finite.any():
        return 0.0, {}
    big = 1.0 + 2.0 * (n + m) * float(np.abs(cost[finite]).max() + 1.0)
    # Slack columns let any row stay unmatched at price ``big``.
    work = np.where(finite, cost, 4.0 * big)
    work = np.hstack([work, np.full((n, n), big)])
    target = _solve(work)
    tol = 1e-9 * max(1.0, abs(target))
    fixed: dict[int, int] = {}
    rows = list(range(n))
    cols = list(range(work.shape[1]))
    spent = 0.0
    for i in range(n):
        rest_rows = [r for r in rows if r > i]
        for j in [c for c in cols if c not in fixed.values()]:
            if j < m and not finite[i, j]:
                continue
            if j >= m and j != min(c for c in range(m, work.shape[1]) if c not in fixed.values()):
                continue  # slack columns are interchangeable
            rest_cols = [c for c in cols if c not in fixed.values() and c != j]
            sub = work[np.ix_(rest_rows, rest_cols)]
            if spent + work[i, j] + _solve(sub) <= target + tol:
                fixed[i] = j
                spent += work[i, j]
                break
    matching = {i: j for i, j in fixed.items() if j < m}
    return float(sum(cost[i, j] for i, j in matching.items())), matching


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]  # (subtask id, device id)
    total_cost: float
    costs: tuple[float, ...] = ()

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


class DistanceCache:
    """BFS distance fields keyed by (device kind, target cell)."""

    def __init__(self, world: World):
        self.world = world
        self._fields: dict[tuple[DeviceKind, Cell], dict[Cell, int]] = {}
        self.blocked: set[Cell] = set()

    def field(self, kind: DeviceKind, target: Cell) -> dict[Cell, int]:
        key = (kind, target)
        if key not in self._fields:
            passable = PASSABLE[kind]
            self._fields[key] = bfs_distances(self.world.map, [target], passable)
        return self._fields[key]

    def distance(self, kind: DeviceKind, start: Cell, target: Cell) -> float:
        if kind == DeviceKind.DRONE:
            return float(abs(start[0] - target[0]) + abs(start[1] - target[1]))
        d = self.field(kind, target).get(start)
        return INF if d is None else float(d)


def subtask_cost(
    device: Device,
    subtask: Subtask,
    distances: DistanceCache,
    *,
    queued: int = 0,
    initial_battery: float | None = None,
    reserve: float = 0.1,
    load_weight: float = 10.0,
) -> float:
    if subtask.capability not in device.capabilities or device.failed:
        return INF
    if initial_battery is not None and device.battery < reserve * initial_battery:
        return INF
    d = distances.distance(device.kind, device.position, subtask.target)
    if not math.isfinite(d):
        return INF
    return d / device.speed + load_weight * queued


def allocate(
    subtasks: Sequence[Subtask],
    devices: Sequence[Device],
    world: World,
    *,
    queued: Mapping[int, int] | None = None,
    initial_battery: Mapping[int, float] | None = None,
    distances: DistanceCache | None = None,
    cost_override: np.ndarray | None = None,
) -> Assignment:
    """Optimal one-to-one matching of pending subtasks to devices."""
    subs = sorted(subtasks, key=lambda s: s.id)
    devs = sorted(devices, key=lambda d: d.id)
    if cost_override is not None:
        cost = np.asarray(cost_override, dtype=float)
        if cost.shape != (len(subs), len(devs)):
            raise ValueError("cost matrix shape does not match subtasks x devices")
    else:
        distances = distances or DistanceCache(world)
        queued = queued or {}
        initial_battery = initial_battery or {}
        cost = np.array(
            [
                [
                    subtask_cost(d, s, distances, queued=queued.get(d.id, 0), initial_battery=initial_battery.get(d.id))
                    for d in devs
                ]
                for s in subs
            ],
            dtype=float,
        ).reshape(len(subs), len(devs))
    total, match = optimal_matching(cost)
    pairs = tuple((subs[i].id, devs[j].id) for i, j in sorted(match.items()))
    costs = tuple(float(cost[i, j]) for i, j in sorted(match.items()))
    return Assignment(pairs, total, costs)


# -- conflicts ----------------------------------------------------------------


class ConflictKind(str, enum.Enum):
    DUPLICATE = "duplicate"
    SPATIAL = "spatial"
    DEPENDENCY = "dependency"


@dataclass(frozen=True)
class Conflict:
    kind: ConflictKind
    tick: int | None = None
    cell: Cell | None = None
    devices: tuple[int, ...] = ()
    subtask: int | None = None


@dataclass(frozen=True)
class PlanEntry:
    subtask: int
    device: int
    cost: float = 0.0


@dataclass(frozen=True)
class Plan:
    """Snapshot the conflict checker works on.

    ``paths`` lists, per device, the (tick, cell) pairs it is about to enter.
    ``statuses`` and ``depends`` describe the subtasks; ``urgency`` holds the
    urgency of the work each device is doing.
    """

    entries: tuple[PlanEntry, ...] = ()
    paths: tuple[tuple[int, tuple[tuple[int, Cell], ...]], ...] = ()
    kinds: tuple[tuple[int, DeviceKind], ...] = ()
    urgency: tuple[tuple[int, Urgency], ...] = ()
    statuses: tuple[tuple[int, Status], ...] = ()
    depends: tuple[tuple[int, tuple[int, ...]], ...] = ()
    origins: tuple[tuple[int, Cell], ...] = ()

    def path(self, device: int) -> tuple[tuple[int, Cell], ...]:
        return dict(self.paths).get(device, ())

    @staticmethod
    def build(
        entries: Iterable[PlanEntry] = (),
        paths: Mapping[int, Sequence[tuple[int, Cell]]] | None = None,
        kinds: Mapping[int, DeviceKind] | None = None,
        urgency: Mapping[int, Urgency] | None = None,
        statuses: Mapping[int, Status] | None = None,
        depends: Mapping[int, Sequence[int]] | None = None,
        origins: Mapping[int, Cell] | None = None,
    ) -> "Plan":
        return Plan(
            tuple(sorted(entries, key=lambda e: (e.subtask, e.device))),
            tuple(sorted((k, tuple(v)) for k, v in (paths or {}).items())),
            tuple(sorted((kinds or {}).items())),
            tuple(sorted((urgency or {}).items())),
            tuple(sorted((statuses or {}).items())),
            tuple(sorted((k, tuple(v)) for k, v in (depends or {}).items())),
            tuple(sorted((origins or {}).items())),
        )


def detect_conflicts(plan: Plan, tick: int | None = None) -> list[Conflict]:
    """Duplicate assignments, same-cell same-tick ground entries, premature starts.

    ``tick`` limits spatial checks to entries at or after that tick.
    """
    out: list[Conflict] = []
    holders: dict[int, list[int]] = {}
    for e in plan.entries:
        holders.setdefault(e.subtask, []).append(e.device)
    for sid, devs in sorted(holders.items()):
        if len(set(devs)) > 1:
            out.append(Conflict(ConflictKind.DUPLICATE, devices=tuple(sorted(set(devs))), subtask=sid))

    kinds = dict(plan.kinds)
    entering: dict[tuple[int, Cell], list[int]] = {}
    for dev, path in plan.paths:
        if kinds.get(dev) not in GROUND_KINDS:
            continue
        for t, cell in path:
            if tick is None or t >= tick:
                entering.setdefault((t, cell), []).append(dev)
    for (t, cell), devs in sorted(entering.items()):
        if len(devs) > 1:
            out.append(Conflict(ConflictKind.SPATIAL, tick=t, cell=cell, devices=tuple(sorted(devs))))

    statuses = dict(plan.statuses)
    for sid, deps in plan.depends:
        if statuses.get(sid) == Status.ACTIVE and any(statuses.get(d) != Status.DONE for d in deps):
            out.append(Conflict(ConflictKind.DEPENDENCY, subtask=sid))
    return out


def _delay(path: tuple[tuple[int, Cell], ...], at: int) -> tuple[tuple[int, Cell], ...]:
    """Hold position for one tick from ``at`` on."""
    return tuple((t + 1 if t >= at else t, c) for t, c in path)


def resolve(conflicts: Sequence[Conflict], plan: Plan) -> Plan:
    """Apply the fixed resolution rules; applying them twice changes nothing."""
    entries = list(plan.entries)
    paths = dict(plan.paths)
    statuses = dict(plan.statuses)
    urgency = dict(plan.urgency)
    for c in conflicts:
        if c.kind == ConflictKind.DUPLICATE:
            holders = [e for e in entries if e.subtask == c.subtask]
            if len(holders) <= 1:
                continue
            keep = min(holders, key=lambda e: (e.cost, e.device))
            entries = [e for e in entries if e.subtask != c.subtask or e is keep]
        elif c.kind == ConflictKind.SPATIAL:
            contenders = [d for d in c.devices if (c.tick, c.cell) in paths.get(d, ())]
            if len(contenders) <= 1:
                continue
            winner = min(contenders, key=lambda d: (int(urgency.get(d, Urgency.DEFERRED)), d))
            for d in contenders:
                if d != winner:
                    paths[d] = _delay(paths[d], c.tick)
        elif c.kind == ConflictKind.DEPENDENCY:
            if statuses.get(c.subtask) == Status.ACTIVE:
                statuses[c.subtask] = Status.PENDING
                entries = [e for e in entries if e.subtask != c.subtask]
    return replace(
        plan,
        entries=tuple(entries),
        paths=tuple(sorted(paths.items())),
        statuses=tuple(sorted(statuses.items())),
    )


# -- coordinator ----------------------------------------------------------------


@dataclass
class Transition:
    tick: int
    subtask: int
    device: int | None
    old: Status
    new: Status


@dataclass
class CohesiveMind:
    """Single coordinator instance owning every task and subtask."""

    world: World
    subtask_timeout: int = 200
    max_concurrent: int = 1
    load_weight: float = 10.0
    battery_reserve: float = 0.1
    tasks: dict[int, Task] = field(default_factory=dict)
    subtasks: dict[int, Subtask] = field(default_factory=dict)
    queues: dict[int, list[int]] = field(default_factory=dict)
    initial_battery: dict[int, float] = field(default_factory=dict)
    log: list[Transition] = field(default_factory=list)
    conflicts_resolved: int = 0
    _next_task: int = 0
    _next_subtask: int = 0

    def __post_init__(self):
        self.distances = DistanceCache(self.world)
        for d in self.world.devices:
            self.queues.setdefault(d.id, [])
            self.initial_battery.setdefault(d.id, d.battery)

    def issue(self, command: Command) -> Task:
        task = parse(command, self.world, task_id=self._next_task, first_subtask_id=self._next_subtask)
        self._next_task += 1
        self._next_subtask += len(task.subtasks)
        self.tasks[task.id] = task
        for s in task.subtasks:
            self.subtasks[s.id] = s
        return task

    def set_status(self, sid: int, new: Status, tick: int, device: int | None = None) -> None:
        s = self.subtasks[sid]
        old = s.status
        holder = s.assignee
        s.transition(new, device)
        if new == Status.ASSIGNED:
            self.queues[device].append(sid)
        elif new == Status.ACTIVE:
            # The clock starts when the device begins the work, not while queued.
            s.deadline = tick + self.subtask_timeout
        elif holder is not None and new in (Status.PENDING, Status.FAILED, Status.DONE):
            if sid in self.queues.get(holder, []):
                self.queues[holder].remove(sid)
        self.log.append(Transition(tick, sid, device if device is not None else holder, old, new))

    def ready(self) -> list[Subtask]:
        return [
            s
            for s in self.subtasks.values()
            if s.status == Status.PENDING and all(self.subtasks[d].status == Status.DONE for d in s.depends)
        ]

    def allocate(self, devices: Sequence[Device], tick: int) -> Assignment:
        alive = [d for d in devices if not d.failed]
        pending = self.ready()
        if not pending or not alive:
            return Assignment((), 0.0)
        queued = {d.id: len(self.queues.get(d.id, [])) for d in alive}
        result = allocate(
            pending, alive, self.world, queued=queued, initial_battery=self.initial_battery, distances=self.distances
        )
        for sid, did in result.pairs:
            self.set_status(sid, Status.ASSIGNED, tick, did)
        return result

    def current(self, device_id: int) -> Subtask | None:
        q = self.queues.get(device_id, [])
        return self.subtasks[q[0]] if q else None

    def activate(self, device_id: int, tick: int) -> Subtask | None:
        cur = self.current(device_id)
        if cur is None or cur.status != Status.ASSIGNED:
            return cur
        active = sum(1 for sid in self.queues[device_id] if self.subtasks[sid].status == Status.ACTIVE)
        if active < self.max_concurrent:
            self.set_status(cur.id, Status.ACTIVE, tick)
        return cur

    def complete(self, sid: int, tick: int) -> None:
        self.set_status(sid, Status.DONE, tick)

    def fail(self, sid: int, tick: int) -> None:
        """A missed deadline: Failed, then straight back to Pending for re-planning."""
        s = self.subtasks[sid]
        if s.status == Status.ASSIGNED:
            self.set_status(sid, Status.PENDING, tick)
            return
        self.set_status(sid, Status.FAILED, tick)
        self.set_status(sid, Status.PENDING, tick)

    def expire(self, tick: int) -> list[int]:
        late = [
            s.id
            for s in self.subtasks.values()
            if s.status in (Status.ASSIGNED, Status.ACTIVE) and s.deadline is not None and tick > s.deadline
        ]
        for sid in late:
            self.fail(sid, tick)
        return late

    def device_failed(self, device_id: int, tick: int) -> list[int]:
        """Return the failed device's unfinished work to the pending pool."""
        freed = list(self.queues.get(device_id, []))
        for sid in freed:
            if self.subtasks[sid].status in (Status.ASSIGNED, Status.ACTIVE):
                self.set_status(sid, Status.PENDING, tick)
        self.queues[device_id] = []
        return freed

    def replan(self, devices: Sequence[Device], tick: int, *, failed: Iterable[int] = ()) -> Assignment:
        for d in failed:
            self.device_failed(d, tick)
        return self.allocate(devices, tick)

    def plan_snapshot(self, devices: Sequence[Device], paths: Mapping[int, Sequence[tuple[int, Cell]]]) -> Plan:
        entries = [
            PlanEntry(s.id, s.assignee)
            for s in self.subtasks.values()
            if s.assignee is not None and s.status in (Status.ASSIGNED, Status.ACTIVE)
        ]
        urgency = {}
        for d in devices:
            cur = self.current(d.id)
            urgency[d.id] = cur.urgency if cur is not None else Urgency.DEFERRED
        return Plan.build(
            entries,
            paths,
            {d.id: d.kind for d in devices},
            urgency,
            {s.id: s.status for s in self.subtasks.values()},
            {s.id: s.depends for s in self.subtasks.values() if s.depends},
            {d.id: d.position for d in devices},
        )

    def scoreable_tasks(self) -> list[Task]:
        return [t for t in self.tasks.values() if t.warning is None]
