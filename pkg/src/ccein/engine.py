"""Discrete-event episode loop: movement, observation, transmission, tasks, metrics.

Time advances in ticks. Future work (transmission ends, bandwidth steps,
scripted failures) sits in a priority queue keyed by
(tick, kind priority, entity, sequence); everything decided during a tick is
pushed to the same queue and drained in that order, so the trace is a total
order that does not depend on insertion order.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass, field, replace
from typing import Any, Protocol, Sequence

import numpy as np

from .channel import (
    BandwidthSchedule,
    ChannelLoad,
    ChannelState,
    Coding,
    LinkParams,
    SnrProcess,
    channel_utilization,
    transmit,
)
from .cohesive import CohesiveMind, Command, Status, TaskKind, detect_conflicts, resolve
from .draosc.baselines import baseline_greedy, baseline_static, least_utilized
from .draosc.mdp import CommState, Decision, RewardWeights, TransmissionAction, defer_gate, reward
from .draosc.policy import PolicyNet
from .scenario import GROUND_KINDS, MOVE_ENERGY, PASSABLE, Device, DeviceKind, World, render_patch
from .semantics import (
    RAW_PAYLOAD_BYTES,
    AttributeKey,
    KnowledgeBase,
    SemanticDescriptor,
    Urgency,
    build_knowledge_base,
    consistency_score,
    corrupt,
    encode,
    merge,
)

TRACE_VERSION = 1
Cell = tuple[int, int]


class EventKind(enum.IntEnum):
    """Value is the processing priority within a tick."""

    BANDWIDTH_CHANGE = 0
    DEVICE_FAILURE = 1
    TRANSMISSION_END = 2
    SUBTASK_STATUS_CHANGE = 3
    DEVICE_MOVE = 4
    OBSERVATION_MADE = 5
    MESSAGE_ENQUEUED = 6
    TRANSMISSION_START = 7


EVENT_NAMES = {
    EventKind.BANDWIDTH_CHANGE: "BandwidthChange",
    EventKind.DEVICE_FAILURE: "DeviceFailure",
    EventKind.TRANSMISSION_END: "TransmissionEnd",
    EventKind.SUBTASK_STATUS_CHANGE: "SubtaskStatusChange",
    EventKind.DEVICE_MOVE: "DeviceMove",
    EventKind.OBSERVATION_MADE: "ObservationMade",
    EventKind.MESSAGE_ENQUEUED: "MessageEnqueued",
    EventKind.TRANSMISSION_START: "TransmissionStart",
}


@dataclass(order=True)
class Event:
    tick: int
    kind: EventKind
    entity: int
    seq: int
    payload: dict = field(compare=False, default_factory=dict)


class EventQueue:
    def __init__(self):
        self._heap: list[Event] = []
        self._seq = 0

    def push(self, tick: int, kind: EventKind, entity: int = -1, **payload) -> Event:
        ev = Event(tick, EventKind(kind), entity, self._seq, payload)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def pop_due(self, tick: int):
        while self._heap and self._heap[0].tick <= tick:
            yield heapq.heappop(self._heap)

    def __len__(self) -> int:
        return len(self._heap)


# -- transmission schemes -----------------------------------------------------


class Scheme(Protocol):
    name: str
    uses_defer_gate: bool

    def act(self, state: CommState, channel_util: Sequence[float]) -> TransmissionAction: ...


@dataclass
class StaticScheme:
    name: str = "static"
    uses_defer_gate: bool = False

    def act(self, state, channel_util):
        return baseline_static(state)


@dataclass
class GreedyScheme:
    name: str = "greedy"
    uses_defer_gate: bool = False

    def act(self, state, channel_util):
        return baseline_greedy(state, channel_util)


@dataclass
class AdaptiveScheme:
    net: PolicyNet
    name: str = "adaptive"
    uses_defer_gate: bool = True

    def act(self, state, channel_util):
        action = self.net.act(state)
        if action.channel >= len(channel_util):
            raise ValueError("policy channel head larger than the channel count")
        return action


@dataclass
class MinimalPayloadScheme:
    """Idealised reference for TE: smallest payloads, full power."""

    name: str = "oracle"
    uses_defer_gate: bool = False

    def act(self, state, channel_util):
        return TransmissionAction(least_utilized(channel_util), 7, 3, Coding.EFFICIENT)


SCHEME_NAMES = ("adaptive", "static", "greedy")


# -- configuration and results --------------------------------------------------


@dataclass(frozen=True)
class EngineConfig:
    episode_ticks: int = 600
    snr_db: float = 12.0
    snr_step_db: float = 0.5
    snr_bound_db: float = 3.0
    bandwidth: BandwidthSchedule = field(default_factory=BandwidthSchedule)
    num_channels: int = 4
    deadline_ticks: tuple[int, int, int] = (2, 5, 20)
    map_update_period: int = 20
    map_update_radius: int = 5
    work_ticks: int = 3
    subtask_timeout: int = 200
    arq: bool = True
    # "latest": a target's receiver view is its newest decodable report;
    # "accumulate": attributes from every report are unioned.
    receiver_model: str = "latest"
    category_critical: bool = True  # a lost Category fragment voids the message
    defer_threshold: float = 0.25
    defer_margin: int = 2
    utilization_window: int = 10
    link: LinkParams = field(default_factory=LinkParams)
    weights: RewardWeights = field(default_factory=RewardWeights)
    failures: tuple[tuple[int, int], ...] = ()  # (tick, device id)
    commands: tuple[Command, ...] | None = None  # None: one VictimRescue per victim
    patch_radius: int = 7
    record_trace: bool = True

    def validate(self, scheme: Scheme) -> None:
        if isinstance(scheme, AdaptiveScheme) and scheme.net.shape.num_channels != self.num_channels:
            raise ValueError(
                f"policy has {scheme.net.shape.num_channels} channels, config has {self.num_channels}"
            )
        if self.episode_ticks < 1:
            raise ValueError("episode must last at least one tick")
        if self.receiver_model not in ("latest", "accumulate"):
            raise ValueError(f"unknown receiver model {self.receiver_model!r}")


@dataclass
class TxRecord:
    tick: int
    device: int
    msg_id: int
    urgency: Urgency
    target: int
    subtask: int | None
    channel: int
    power_dbm: float
    compression: int
    coding: Coding
    bytes_sent: int
    transmit_ticks: int
    airtime_s: float
    energy_j: float
    bandwidth_mhz: float
    snr_db: float
    sinr_db: float
    delivered: int
    fragments: int
    category_ok: bool
    reward: float


@dataclass
class MetricsReport:
    tcr: float
    tcr_vacuous: bool
    tasks_total: int
    tasks_completed: int
    tasks_flagged: int
    te_raw: float
    te_norm: float | None
    transmitted_mb: float
    sc: float
    total_energy_j: float
    movement_energy_j: float
    mean_power_dbm: float
    power_by_bandwidth: dict[float, float]
    transmissions: int
    episode_ticks: int
    conflicts_resolved: int


@dataclass
class Observation:
    tick: int
    device: int
    center: Cell
    patch: np.ndarray
    reason: str


@dataclass
class EpisodeResult:
    metrics: MetricsReport
    transmissions: list[TxRecord]
    trace: list[dict]
    observations: list[Observation]
    received: dict[int, SemanticDescriptor]
    coordinator: CohesiveMind

    def trace_text(self, header: dict[str, Any]) -> str:
        lines = [json.dumps({"format": "ccein-trace", "version": TRACE_VERSION, **header}, sort_keys=True)]
        lines.extend(json.dumps(r, sort_keys=True) for r in self.trace)
        return "\n".join(lines) + "\n"


@dataclass
class Pending:
    """A message waiting for the radio; re-encoded on every attempt."""

    seq: int
    urgency: Urgency
    target: int
    created: int
    deadline: int
    subtask: int | None = None
    attempts: int = 0

    def key(self):
        return (int(self.urgency), self.created, self.seq)


def default_commands(world: World) -> tuple[Command, ...]:
    return tuple(Command(TaskKind.VICTIM_RESCUE, v, 0) for v in world.victims)


def compute_tcr(coordinator: CohesiveMind) -> tuple[float, bool]:
    """Completed over issued tasks; tasks flagged at parse time are left out."""
    tasks = coordinator.scoreable_tasks()
    if not tasks:
        return 1.0, True
    return sum(t.done for t in tasks) / len(tasks), False


def compute_te(completed: int, transmitted_mb: float, oracle_te_raw: float | None = None) -> tuple[float, float | None]:
    te_raw = completed / transmitted_mb if transmitted_mb > 0 else 0.0
    if oracle_te_raw is None:
        return te_raw, None
    if oracle_te_raw <= 0:
        return te_raw, 1.0  # vacuous reference run
    return te_raw, float(min(1.0, max(0.0, te_raw / oracle_te_raw)))


# -- the episode loop ---------------------------------------------------------------


class Episode:
    def __init__(self, world: World, scheme: Scheme, config: EngineConfig, seed: int):
        config.validate(scheme)
        self.world = world
        self.scheme = scheme
        self.cfg = config
        self.seed = seed
        ss = np.random.SeedSequence([seed, 0xCCE1])
        chan_ss, snr_ss = ss.spawn(2)
        self.chan_rng = np.random.default_rng(chan_ss)
        self.snr_rng = np.random.default_rng(snr_ss)
        self.kb: KnowledgeBase = build_knowledge_base(world)
        self.target_of = {pos: tid for tid, pos in self.kb.positions.items()}
        self.features = sorted(
            tid for tid, d in self.kb.references.items() if d.as_dict()[AttributeKey.CATEGORY] != "victim"
        )
        self.coord = CohesiveMind(world, subtask_timeout=config.subtask_timeout)
        self.devices: dict[int, Device] = {d.id: d for d in world.devices}
        self.initial_battery = {d.id: d.battery for d in world.devices}
        self.snr = {
            d.id: SnrProcess(config.snr_db, config.snr_step_db, config.snr_bound_db) for d in world.devices
        }
        self.queue: dict[int, list[Pending]] = {d.id: [] for d in world.devices}
        self.busy_until: dict[int, int] = {d.id: 0 for d in world.devices}
        self.in_flight: dict[int, Pending | None] = {d.id: None for d in world.devices}
        self.progress: dict[int, float] = {d.id: 0.0 for d in world.devices}
        self.worked: dict[int, int] = {d.id: 0 for d in world.devices}
        self.reported: dict[int, int | None] = {d.id: None for d in world.devices}
        self.map_cursor: dict[int, int] = {d.id: 0 for d in world.devices}
        self.failed: set[int] = set()
        self.load = ChannelLoad(config.num_channels, config.utilization_window)
        self.bandwidth = config.bandwidth.at(0)
        self.events = EventQueue()
        self.trace: list[dict] = []
        self.tx: list[TxRecord] = []
        self.observations: list[Observation] = []
        self.received: dict[int, SemanticDescriptor] = {}
        self.movement_energy = 0.0
        self.msg_seq = 0
        self.pending_seq = 0
        self.dirty = True
        self._log_cursor = 0

    # -- helpers -------------------------------------------------------------

    def _emit(self, tick: int, kind: EventKind, entity: int = -1, **payload) -> None:
        self.events.push(tick, kind, entity, **payload)

    def _record(self, ev: Event) -> None:
        if self.cfg.record_trace:
            self.trace.append({"tick": ev.tick, "kind": EVENT_NAMES[ev.kind], "entity": ev.entity, **ev.payload})

    def _flush_transitions(self) -> None:
        log = self.coord.log
        while self._log_cursor < len(log):
            tr = log[self._log_cursor]
            self._log_cursor += 1
            self.dirty = True
            self._emit(
                tr.tick,
                EventKind.SUBTASK_STATUS_CHANGE,
                tr.subtask,
                subtask=tr.subtask,
                device=tr.device,
                old=tr.old.value,
                new=tr.new.value,
            )

    def _drain(self, tick: int) -> None:
        for ev in self.events.pop_due(tick):
            if ev.kind == EventKind.BANDWIDTH_CHANGE:
                self.bandwidth = ev.payload["bandwidth_mhz"]
            elif ev.kind == EventKind.DEVICE_FAILURE:
                self._fail_device(ev.entity, tick)
            elif ev.kind == EventKind.TRANSMISSION_END:
                self._finish_transmission(ev, tick)
            self._record(ev)
            self._flush_transitions()

    def alive(self) -> list[Device]:
        return [d for d in self.devices.values() if d.id not in self.failed]

    def _fail_device(self, device_id: int, tick: int) -> None:
        if device_id in self.failed or device_id not in self.devices:
            return
        self.failed.add(device_id)
        self.queue[device_id] = []
        self.coord.device_failed(device_id, tick)
        self.dirty = True

    def channel_util(self, tick: int) -> tuple[float, ...]:
        return channel_utilization(self.bandwidth, self.load.own(tick), self.cfg.link)

    def _goal_reached(self, device: Device, target: Cell) -> bool:
        if device.position == target:
            return True
        if device.kind in GROUND_KINDS and self.world.map[target] not in PASSABLE[device.kind]:
            return abs(device.position[0] - target[0]) + abs(device.position[1] - target[1]) == 1
        return False

    def _next_cell(self, device: Device, target: Cell) -> Cell | None:
        x, y = device.position
        if device.kind == DeviceKind.DRONE:
            tx, ty = target
            if x != tx:
                return (x + (1 if tx > x else -1), y)
            if y != ty:
                return (x, y + (1 if ty > y else -1))
            return None
        dist = self.coord.distances.field(device.kind, target)
        here = dist.get(device.position)
        if here is None:
            return None
        for nxt in self.world.map.neighbours(device.position):
            if dist.get(nxt) == here - 1 and self.world.map[nxt] in PASSABLE[device.kind]:
                return nxt
        return None

    # -- per-tick phases ---------------------------------------------------------

    def _movement(self, tick: int) -> None:
        steps: dict[int, list[Cell]] = {}
        for d in self.alive():
            cur = self.coord.activate(d.id, tick)
            if cur is None or cur.status != Status.ACTIVE or self._goal_reached(d, cur.target):
                self.progress[d.id] = 0.0
                continue
            self.progress[d.id] += d.speed
            path: list[Cell] = []
            probe = d
            while self.progress[d.id] >= 1.0 - 1e-12:
                nxt = self._next_cell(probe, cur.target)
                if nxt is None:
                    break
                path.append(nxt)
                self.progress[d.id] -= 1.0
                probe = replace(probe, position=nxt)
                if self._goal_reached(probe, cur.target):
                    break
            if path:
                steps[d.id] = path
            else:
                self.progress[d.id] = min(self.progress[d.id], 1.0)
        ground = {i: p for i, p in steps.items() if self.devices[i].kind in GROUND_KINDS}
        if len(ground) > 1:
            plan = self.coord.plan_snapshot(self.alive(), {i: [(tick, p[0])] for i, p in ground.items()})
            conflicts = detect_conflicts(plan, tick)
            spatial = [c for c in conflicts if c.cell is not None]
            if spatial:
                resolved = resolve(spatial, plan)
                for i, path in resolved.paths:
                    if path and path[0][0] != tick:
                        del steps[i]  # waits this tick
                        self.progress[i] = 1.0
                self.coord.conflicts_resolved += len(spatial)
        for i in sorted(steps):
            d = self.devices[i]
            for cell in steps[i]:
                cost = MOVE_ENERGY[d.kind]
                self.movement_energy += min(cost, d.battery)
                d = d.moved(cell, d.battery - cost)
                self._emit(tick, EventKind.DEVICE_MOVE, i, to=list(cell), battery=d.battery)
                if d.failed:
                    break
            self.devices[i] = d
            if d.failed:
                self._emit(tick, EventKind.DEVICE_FAILURE, i, reason="battery")

    def _observe(self, tick: int) -> None:
        for d in self.alive():
            cur = self.coord.current(d.id)
            if cur is None or cur.status != Status.ACTIVE or not self._goal_reached(d, cur.target):
                self.worked[d.id] = 0
                continue
            if self.reported[d.id] == cur.id:
                continue
            self.worked[d.id] += 1
            if self.worked[d.id] < self.cfg.work_ticks:
                continue
            self.worked[d.id] = 0
            self.reported[d.id] = cur.id
            target = self.target_of.get(cur.target)
            self._observation(tick, d, cur.action)
            if target is None:
                # Nothing to report (e.g. an area survey of empty ground): done on arrival.
                self.coord.complete(cur.id, tick)
                continue
            self._enqueue(tick, d.id, cur.urgency, target, cur.id)

    def _observation(self, tick: int, d: Device, reason: str) -> None:
        patch = render_patch(self.world, d.position, self.cfg.patch_radius)
        self.observations.append(Observation(tick, d.id, d.position, patch, reason))
        self._emit(tick, EventKind.OBSERVATION_MADE, d.id, center=list(d.position), reason=reason)

    def _enqueue(self, tick: int, device_id: int, urgency: Urgency, target: int, subtask: int | None) -> None:
        window = self.cfg.deadline_ticks[int(urgency)]
        p = Pending(self.pending_seq, urgency, target, tick, tick + window, subtask)
        self.pending_seq += 1
        self.queue[device_id].append(p)
        self._emit(
            tick, EventKind.MESSAGE_ENQUEUED, device_id, urgency=urgency.name, target=target, subtask=subtask,
            deadline=p.deadline,
        )

    def _map_updates(self, tick: int) -> None:
        period = self.cfg.map_update_period
        if period <= 0 or not self.features:
            return
        for d in self.alive():
            if (tick + 3 * d.id) % period != 0:
                continue
            r = self.cfg.map_update_radius
            near = [
                tid
                for tid in self.features
                if abs(self.kb.positions[tid][0] - d.position[0]) <= r
                and abs(self.kb.positions[tid][1] - d.position[1]) <= r
            ]
            if not near:
                near = [min(self.features, key=lambda t: (abs(self.kb.positions[t][0] - d.position[0])
                                                          + abs(self.kb.positions[t][1] - d.position[1]), t))]
            target = near[self.map_cursor[d.id] % len(near)]
            self.map_cursor[d.id] += 1
            self._observation(tick, d, "map")
            self._enqueue(tick, d.id, Urgency.DEFERRED, target, None)

    def _subtask_live(self, device_id: int, sid: int | None) -> bool:
        if sid is None:
            return False
        s = self.coord.subtasks[sid]
        return s.status == Status.ACTIVE and s.assignee == device_id

    def _radio(self, tick: int) -> None:
        critical_anywhere = any(
            p.urgency == Urgency.CRITICAL for q in self.queue.values() for p in q
        )
        util = self.channel_util(tick)
        for d in self.alive():
            q = self.queue[d.id]
            # Expire stale messages; task reports are re-issued while the work is live.
            for p in [p for p in q if p.deadline <= tick]:
                q.remove(p)
                if self._subtask_live(d.id, p.subtask):
                    window = self.cfg.deadline_ticks[int(p.urgency)]
                    q.append(replace(p, created=tick, deadline=tick + window, seq=self.pending_seq))
                    self.pending_seq += 1
            q[:] = [p for p in q if p.subtask is None or self._subtask_live(d.id, p.subtask)]
            if tick < self.busy_until[d.id] or not q:
                continue
            snr_db = self.snr[d.id].value
            battery = d.battery / self.initial_battery[d.id] if self.initial_battery[d.id] > 0 else 0.0
            state = CommState.from_raw(q[0].urgency, snr_db, self.bandwidth, float(np.mean(util)), len(q), battery)
            chosen = None
            for p in sorted(q, key=Pending.key):
                st = replace(state, urgency=p.urgency)
                if self.scheme.uses_defer_gate:
                    dummy = encode(self.kb, p.target, p.urgency, 0, tick=p.created, deadline_ticks=p.deadline - p.created)
                    gate = defer_gate(
                        st, dummy, critical_queued=critical_anywhere, now=tick,
                        threshold=self.cfg.defer_threshold, safety_margin=self.cfg.defer_margin,
                    )
                    if gate == Decision.DEFER:
                        continue
                chosen, state = p, st
                break
            if chosen is None:
                continue
            q.remove(chosen)
            self._start_transmission(tick, d, chosen, state, util, snr_db)

    def _start_transmission(self, tick, d: Device, p: Pending, state: CommState, util, snr_db: float) -> None:
        action = self.scheme.act(state, util)
        msg = encode(
            self.kb,
            p.target,
            p.urgency,
            action.compression_level,
            msg_id=self.msg_seq,
            source=d.id,
            tick=tick,
            deadline_ticks=max(1, p.deadline - tick),
            payload_bytes_raw=RAW_PAYLOAD_BYTES[p.urgency],
            subtask_id=p.subtask,
        )
        self.msg_seq += 1
        ch = ChannelState(snr_db, self.bandwidth, float(np.mean(util)), self.cfg.num_channels, tuple(util))
        outcome = transmit(msg, action, ch, self.chan_rng, self.cfg.link)
        r = reward(outcome, msg, state, self.cfg.weights, tick_s=self.cfg.link.tick_s)
        self.busy_until[d.id] = tick + outcome.transmit_time
        self.load.record(action.channel, tick, outcome.airtime_s, self.cfg.link.tick_s)
        p.attempts += 1
        self.in_flight[d.id] = p
        self._emit(
            tick, EventKind.TRANSMISSION_START, d.id, msg=msg.msg_id, urgency=p.urgency.name,
            channel=action.channel, power_dbm=action.power_dbm, compression=action.compression_level,
            coding=action.coding.name,
        )
        self._emit(tick + outcome.transmit_time, EventKind.TRANSMISSION_END, d.id, msg=msg.msg_id,
                   bytes=msg.payload_bytes_compressed, delivered=[int(v) for v in outcome.delivered],
                   energy_j=outcome.energy_joules, _msg=msg, _outcome=outcome, _pending=p)
        got = dict(zip(msg.descriptor.keys(), outcome.delivered))
        self.tx.append(
            TxRecord(
                tick, d.id, msg.msg_id, p.urgency, p.target, p.subtask, action.channel, action.power_dbm,
                action.compression_level, action.coding, msg.payload_bytes_compressed, outcome.transmit_time,
                outcome.airtime_s, outcome.energy_joules, self.bandwidth, snr_db, outcome.sinr_db,
                sum(outcome.delivered), len(outcome.delivered), bool(got.get(AttributeKey.CATEGORY, False)), r,
            )
        )

    def _finish_transmission(self, ev: Event, tick: int) -> None:
        msg = ev.payload.pop("_msg")
        outcome = ev.payload.pop("_outcome")
        p: Pending = ev.payload.pop("_pending")
        self.in_flight[ev.entity] = None
        desc = corrupt(msg, outcome.delivered, category_critical=self.cfg.category_critical)
        if not desc.empty:
            tid = msg.descriptor.target_id
            if self.cfg.receiver_model == "accumulate":
                desc = merge(self.received.get(tid), desc)
            self.received[tid] = desc
        keys = set(desc.keys())
        ok = {AttributeKey.CATEGORY, AttributeKey.POSITION} <= keys
        if p.subtask is not None and self._subtask_live(ev.entity, p.subtask):
            if ok:
                self.coord.complete(p.subtask, tick)
            elif self.cfg.arq and ev.entity not in self.failed:
                self.queue[ev.entity].append(p)

    def _allocate(self, tick: int) -> None:
        self.coord.expire(tick)
        self._flush_transitions()
        if self.dirty:
            self.dirty = False
            self.coord.allocate(self.alive(), tick)
            self._flush_transitions()

    def run(self) -> EpisodeResult:
        cfg = self.cfg
        for start, bw in cfg.bandwidth.breakpoints:
            if 0 < start < cfg.episode_ticks:
                self._emit(start, EventKind.BANDWIDTH_CHANGE, -1, bandwidth_mhz=bw)
        for t, dev in cfg.failures:
            self._emit(t, EventKind.DEVICE_FAILURE, dev, reason="scripted")
        commands = cfg.commands if cfg.commands is not None else default_commands(self.world)
        for c in commands:
            self.coord.issue(c)
        for t in range(cfg.episode_ticks):
            if t > 0:
                for i in sorted(self.snr):
                    self.snr[i].step(self.snr_rng)
            self._drain(t)
            self._allocate(t)
            self._movement(t)
            self._drain(t)
            self._observe(t)
            self._map_updates(t)
            self._radio(t)
            self._flush_transitions()
            self._drain(t)
            self.load.prune(t)
        # Transmissions still in the air at the end never arrive.
        return EpisodeResult(self._metrics(), self.tx, self.trace, self.observations, self.received, self.coord)

    def _metrics(self) -> MetricsReport:
        tcr, vacuous = compute_tcr(self.coord)
        scoreable = self.coord.scoreable_tasks()
        completed = sum(t.done for t in scoreable)
        sent = [t for t in self.tx if t.tick + t.transmit_ticks < self.cfg.episode_ticks]
        mb = sum(t.bytes_sent for t in sent) / 1e6
        te_raw, _ = compute_te(completed, mb)
        victims = self.kb.victims()
        sc = consistency_score(self.received, victims) if len(victims) else 1.0
        by_bw: dict[float, list[float]] = {}
        for t in self.tx:
            by_bw.setdefault(t.bandwidth_mhz, []).append(t.power_dbm)
        return MetricsReport(
            tcr=tcr,
            tcr_vacuous=vacuous,
            tasks_total=len(scoreable),
            tasks_completed=completed,
            tasks_flagged=len(self.coord.tasks) - len(scoreable),
            te_raw=te_raw,
            te_norm=None,
            transmitted_mb=mb,
            sc=sc,
            total_energy_j=float(sum(t.energy_j for t in self.tx)),
            movement_energy_j=self.movement_energy,
            mean_power_dbm=float(np.mean([t.power_dbm for t in self.tx])) if self.tx else float("nan"),
            power_by_bandwidth={k: float(np.mean(v)) for k, v in sorted(by_bw.items())},
            transmissions=len(self.tx),
            episode_ticks=self.cfg.episode_ticks,
            conflicts_resolved=self.coord.conflicts_resolved,
        )


def run_episode(world: World, scheme: Scheme, config: EngineConfig, seed: int) -> EpisodeResult:
    return Episode(world, scheme, config, seed).run()


def oracle_config(config: EngineConfig) -> EngineConfig:
    return replace(config, link=replace(config.link, loss_free=True))


def run_with_oracle(world: World, scheme: Scheme, config: EngineConfig, seed: int, oracle_te: float | None = None):
    """Run ``scheme`` and fill in te_norm against the idealised same-seed run."""
    result = run_episode(world, scheme, config, seed)
    if oracle_te is None:
        oracle = run_episode(world, MinimalPayloadScheme(), replace(oracle_config(config), record_trace=False), seed)
        oracle_te = oracle.metrics.te_raw
    _, norm = compute_te(result.metrics.tasks_completed, result.metrics.transmitted_mb, oracle_te)
    result.metrics.te_norm = norm
    return result, oracle_te
