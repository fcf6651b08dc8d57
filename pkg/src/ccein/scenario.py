"""Post-disaster grid world: map generation, devices and scene patches."""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable

import numpy as np

WORLD_FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class CellKind(enum.IntEnum):
    FREE = 0
    OBSTACLE = 1
    COLLAPSED = 2
    VICTIM = 3
    SUPPLY = 4
    DROPZONE = 5


CELL_CHARS = {
    CellKind.FREE: ".",
    CellKind.OBSTACLE: "#",
    CellKind.COLLAPSED: "B",
    CellKind.VICTIM: "V",
    CellKind.SUPPLY: "S",
    CellKind.DROPZONE: "D",
}
CHAR_CELLS = {c: k for k, c in CELL_CHARS.items()}

# DropZone has no distinct encoding and renders as open ground.
PATCH_ENCODING = {
    CellKind.FREE: 0.0,
    CellKind.OBSTACLE: 0.5,
    CellKind.COLLAPSED: 0.6,
    CellKind.SUPPLY: 0.8,
    CellKind.VICTIM: 1.0,
    CellKind.DROPZONE: 0.0,
}


class DeviceKind(str, enum.Enum):
    DRONE = "drone"
    VEHICLE = "vehicle"
    ROBOT_DOG = "robot_dog"


class Capability(str, enum.Enum):
    AERIAL_SEARCH = "AerialSearch"
    PATH_SEARCH = "PathSearch"
    SUPPLY_DELIVERY = "SupplyDelivery"
    CLOSE_RANGE_SEARCH = "CloseRangeSearch"
    ANNOTATION = "Annotation"
    OBSTACLE_CLEAR = "ObstacleClear"


KIND_CAPABILITIES: dict[DeviceKind, frozenset[Capability]] = {
    DeviceKind.DRONE: frozenset({Capability.AERIAL_SEARCH}),
    DeviceKind.VEHICLE: frozenset(
        {Capability.PATH_SEARCH, Capability.SUPPLY_DELIVERY, Capability.OBSTACLE_CLEAR}
    ),
    DeviceKind.ROBOT_DOG: frozenset({Capability.CLOSE_RANGE_SEARCH, Capability.ANNOTATION}),
}

# Cells each kind may stand on; drones fly over everything.
PASSABLE: dict[DeviceKind, frozenset[CellKind]] = {
    DeviceKind.DRONE: frozenset(CellKind),
    DeviceKind.VEHICLE: frozenset(
        {CellKind.FREE, CellKind.VICTIM, CellKind.SUPPLY, CellKind.DROPZONE}
    ),
    DeviceKind.ROBOT_DOG: frozenset(
        {CellKind.FREE, CellKind.VICTIM, CellKind.SUPPLY, CellKind.DROPZONE, CellKind.COLLAPSED}
    ),
}

GROUND_KINDS = frozenset({DeviceKind.VEHICLE, DeviceKind.ROBOT_DOG})

DEFAULT_SPEED = {DeviceKind.DRONE: 2.0, DeviceKind.VEHICLE: 1.0, DeviceKind.ROBOT_DOG: 0.5}
DEFAULT_BATTERY = {DeviceKind.DRONE: 5.0e4, DeviceKind.VEHICLE: 2.0e5, DeviceKind.ROBOT_DOG: 1.0e5}
# Joules spent per cell moved.
MOVE_ENERGY = {DeviceKind.DRONE: 20.0, DeviceKind.VEHICLE: 50.0, DeviceKind.ROBOT_DOG: 30.0}

Cell = tuple[int, int]


@dataclass(frozen=True)
class Device:
    id: int
    kind: DeviceKind
    position: Cell
    battery: float
    speed: float
    capabilities: frozenset[Capability] = field(default=frozenset())

    def __post_init__(self):
        if not self.capabilities:
            object.__setattr__(self, "capabilities", KIND_CAPABILITIES[self.kind])
        if self.battery < 0:
            raise ValueError("battery must be non-negative")

    @property
    def failed(self) -> bool:
        return self.battery <= 0.0

    def moved(self, position: Cell, battery: float) -> "Device":
        return replace(self, position=position, battery=max(0.0, battery))


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 1
    width: int = 32
    height: int = 32
    victims: int = 10
    obstacles: int = 40
    collapsed: int = 60
    supplies: int = 3
    dropzones: int = 1
    roster: tuple[tuple[DeviceKind, int], ...] = (
        (DeviceKind.DRONE, 2),
        (DeviceKind.VEHICLE, 2),
        (DeviceKind.ROBOT_DOG, 2),
    )
    speeds: tuple[tuple[DeviceKind, float], ...] = tuple(DEFAULT_SPEED.items())
    batteries: tuple[tuple[DeviceKind, float], ...] = tuple(DEFAULT_BATTERY.items())
    bandwidth_schedule: tuple[tuple[int, float], ...] = ((0, 500.0),)
    episode_ticks: int = 600

    def validate(self) -> None:
        if self.width < 8:
            raise ConfigError("scenario.width", f"must be >= 8, got {self.width}")
        if self.height < 8:
            raise ConfigError("scenario.height", f"must be >= 8, got {self.height}")
        for key in ("victims", "obstacles", "collapsed", "supplies", "dropzones"):
            if getattr(self, key) < 0:
                raise ConfigError(f"scenario.{key}", "must be >= 0")
        special = self.victims + self.obstacles + self.collapsed + self.supplies + self.dropzones
        if special > self.width * self.height:
            raise ConfigError(
                "scenario.victims",
                f"{special} special cells exceed the {self.width}x{self.height} grid",
            )
        for kind, count in self.roster:
            if count < 0:
                raise ConfigError(f"scenario.devices.{kind.value}", "must be >= 0")
        if sum(c for _, c in self.roster) > 0 and self.dropzones < 1:
            raise ConfigError("scenario.dropzones", "devices need at least one drop zone")
        if self.episode_ticks < 1:
            raise ConfigError("scenario.episode_ticks", "must be >= 1")
        ticks = [t for t, _ in self.bandwidth_schedule]
        if not ticks or ticks != sorted(ticks) or ticks[0] != 0:
            raise ConfigError("channel.bandwidth_schedule", "breakpoints must be sorted and start at tick 0")
        for _, bw in self.bandwidth_schedule:
            if not 50.0 <= bw <= 500.0:
                raise ConfigError("channel.bandwidth_schedule", f"bandwidth {bw} outside [50, 500] MHz")


@dataclass(frozen=True)
class WorldMap:
    width: int
    height: int
    cells: tuple[tuple[CellKind, ...], ...]  # indexed [y][x]

    def __getitem__(self, cell: Cell) -> CellKind:
        x, y = cell
        return self.cells[y][x]

    def inside(self, cell: Cell) -> bool:
        x, y = cell
        return 0 <= x < self.width and 0 <= y < self.height

    def cells_of(self, kind: CellKind) -> list[Cell]:
        return [
            (x, y)
            for y in range(self.height)
            for x in range(self.width)
            if self.cells[y][x] == kind
        ]

    def count(self, kind: CellKind) -> int:
        return sum(row.count(kind) for row in self.cells)

    def with_cell(self, cell: Cell, kind: CellKind) -> "WorldMap":
        x, y = cell
        rows = list(self.cells)
        row = list(rows[y])
        row[x] = kind
        rows[y] = tuple(row)
        return replace(self, cells=tuple(rows))

    def neighbours(self, cell: Cell) -> Iterable[Cell]:
        x, y = cell
        for nxt in ((x + 1, y), (x - 1, y), (x, y + 1), (x, y - 1)):
            if self.inside(nxt):
                yield nxt


@dataclass(frozen=True)
class World:
    seed: int
    map: WorldMap
    devices: tuple[Device, ...]
    unreachable: frozenset[Cell] = frozenset()

    @property
    def victims(self) -> list[Cell]:
        return self.map.cells_of(CellKind.VICTIM)

    def device(self, device_id: int) -> Device:
        for d in self.devices:
            if d.id == device_id:
                return d
        raise KeyError(device_id)


def bfs_distances(world_map: WorldMap, sources: Iterable[Cell], passable: frozenset[CellKind]) -> dict[Cell, int]:
    """Multi-source BFS over 4-connected passable cells.

    Sources are always expanded, even if their own cell is impassable, so a
    distance field can be grown outwards from an obstacle.
    """
    dist: dict[Cell, int] = {}
    queue: deque[Cell] = deque()
    for s in sources:
        if s not in dist:
            dist[s] = 0
            queue.append(s)
    while queue:
        cur = queue.popleft()
        for nxt in world_map.neighbours(cur):
            if nxt not in dist and world_map[nxt] in passable:
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    return dist


def border_cells(width: int, height: int) -> list[Cell]:
    cells = []
    for y in range(height):
        for x in range(width):
            if x in (0, width - 1) or y in (0, height - 1):
                cells.append((x, y))
    return cells


def unreachable_victims(world_map: WorldMap) -> frozenset[Cell]:
    """Victims a ground vehicle cannot reach from where the devices start.

    Devices start on the dropzones, which are kept connected to the free
    border; without a dropzone any free border cell is an entry point.
    """
    starts = world_map.cells_of(CellKind.DROPZONE)
    if not starts:
        starts = [c for c in border_cells(world_map.width, world_map.height) if world_map[c] == CellKind.FREE]
    reach = bfs_distances(world_map, starts, PASSABLE[DeviceKind.VEHICLE])
    return frozenset(v for v in world_map.cells_of(CellKind.VICTIM) if v not in reach)


def _connect_dropzones(world_map: WorldMap, order: np.ndarray) -> WorldMap:
    """Move any walled-in dropzone to a free cell vehicles can reach from the border.

    Devices start on dropzones, so a sealed one would strand every ground
    device. Candidates are taken in the seeded placement order.
    """
    starts = [c for c in border_cells(world_map.width, world_map.height) if world_map[c] == CellKind.FREE]
    reach = bfs_distances(world_map, starts, PASSABLE[DeviceKind.VEHICLE])
    for zone in world_map.cells_of(CellKind.DROPZONE):
        if zone in reach:
            continue
        for i in order:
            cell = (int(i) % world_map.width, int(i) // world_map.width)
            if world_map[cell] == CellKind.FREE and cell in reach:
                world_map = world_map.with_cell(zone, CellKind.FREE).with_cell(cell, CellKind.DROPZONE)
                break
    return world_map


def generate(config: ScenarioConfig) -> World:
    """Build a world deterministically from ``config.seed``."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    w, h = config.width, config.height
    grid = np.full((h, w), int(CellKind.FREE), dtype=np.int8)

    order = rng.permutation(w * h)
    cursor = 0

    def take(n: int, kind: CellKind) -> None:
        nonlocal cursor
        idx = order[cursor:cursor + n]
        cursor += n
        grid.flat[idx] = int(kind)

    # Placement order matters only for determinism; every count is exact.
    take(config.dropzones, CellKind.DROPZONE)
    take(config.collapsed, CellKind.COLLAPSED)
    take(config.obstacles, CellKind.OBSTACLE)
    take(config.supplies, CellKind.SUPPLY)
    take(config.victims, CellKind.VICTIM)

    cells = tuple(tuple(CellKind(int(v)) for v in row) for row in grid)
    world_map = _connect_dropzones(WorldMap(w, h, cells), order)

    speeds = dict(config.speeds)
    batteries = dict(config.batteries)
    zones = world_map.cells_of(CellKind.DROPZONE)
    devices = []
    next_id = 0
    for kind, count in config.roster:
        for _ in range(count):
            devices.append(
                Device(
                    id=next_id,
                    kind=kind,
                    position=zones[next_id % len(zones)],
                    battery=float(batteries.get(kind, DEFAULT_BATTERY[kind])),
                    speed=float(speeds.get(kind, DEFAULT_SPEED[kind])),
                )
            )
            next_id += 1
    return World(config.seed, world_map, tuple(devices), unreachable_victims(world_map))


def render_patch(world: World | WorldMap, center: Cell, radius: int) -> np.ndarray:
    """Single-channel (2r+1)x(2r+1) view around ``center``; off-map cells are 0."""
    world_map = world.map if isinstance(world, World) else world
    if not world_map.inside(center):
        raise ValueError(f"center {center} outside the map")
    side = 2 * radius + 1
    patch = np.zeros((side, side), dtype=float)
    cx, cy = center
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            cell = (cx + dx, cy + dy)
            if world_map.inside(cell):
                patch[dy + radius, dx + radius] = PATCH_ENCODING[world_map[cell]]
    return patch


def dumps_world(world: World) -> str:
    lines = [
        f"ccein-world {WORLD_FORMAT_VERSION}",
        f"seed {world.seed}",
        f"size {world.map.width} {world.map.height}",
        "grid",
    ]
    for row in world.map.cells:
        lines.append("".join(CELL_CHARS[c] for c in row))
    lines.append(f"devices {len(world.devices)}")
    for d in world.devices:
        lines.append(f"{d.id} {d.kind.value} {d.position[0]} {d.position[1]} {d.battery!r} {d.speed!r}")
    unreachable = sorted(world.unreachable)
    lines.append(f"unreachable {len(unreachable)}")
    for x, y in unreachable:
        lines.append(f"{x} {y}")
    return "\n".join(lines) + "\n"


def loads_world(text: str) -> World:
    lines = text.splitlines()
    head = lines[0].split()
    if head[:1] != ["ccein-world"] or int(head[1]) != WORLD_FORMAT_VERSION:
        raise ValueError(f"unsupported world header: {lines[0]!r}")
    seed = int(lines[1].split()[1])
    _, w, h = lines[2].split()
    w, h = int(w), int(h)
    assert lines[3] == "grid"
    rows = lines[4:4 + h]
    cells = tuple(tuple(CHAR_CELLS[ch] for ch in row) for row in rows)
    i = 4 + h
    n_dev = int(lines[i].split()[1])
    devices = []
    for line in lines[i + 1:i + 1 + n_dev]:
        did, kind, x, y, battery, speed = line.split()
        devices.append(Device(int(did), DeviceKind(kind), (int(x), int(y)), float(battery), float(speed)))
    i += 1 + n_dev
    n_un = int(lines[i].split()[1])
    unreachable = frozenset(
        (int(a), int(b)) for a, b in (ln.split() for ln in lines[i + 1:i + 1 + n_un])
    )
    return World(seed, WorldMap(w, h, cells), tuple(devices), unreachable)
