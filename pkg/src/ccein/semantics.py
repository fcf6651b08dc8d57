"""Symbolic semantic codec: descriptors, lossy compression and consistency scoring.

Perception is modelled as attribute-value descriptors of ground-truth
targets. Each attribute travels as one fragment, so channel loss maps
directly onto semantic degradation.

The consistency score (SC) is the mean, over reference targets, of the
fraction of reference attribute pairs received with the right value. This
formula is our interpretation; the metric is only described qualitatively.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .scenario import CellKind, World

KB_FORMAT_VERSION = 1


class AttributeKey(enum.IntEnum):
    """Attribute keys; the integer order is the compression priority."""

    CATEGORY = 0
    POSITION = 1
    SEVERITY = 2
    ACCESSIBILITY = 3
    CONFIDENCE = 4


class Urgency(enum.IntEnum):
    CRITICAL = 0
    NORMAL = 1
    DEFERRED = 2


COMPRESSION_RATIOS = (1, 2, 4, 8)
# Attributes kept at each compression level.
KEEP_COUNT = (5, 4, 3, 2)

RAW_PAYLOAD_BYTES = {
    Urgency.CRITICAL: 50_000,
    Urgency.NORMAL: 200_000,
    Urgency.DEFERRED: 1_000_000,
}

SEVERITIES = ("low", "medium", "high", "critical")
ACCESS = ("open", "restricted", "blocked")
CONFIDENCES = ("low", "medium", "high")

CATEGORY_OF = {
    CellKind.VICTIM: "victim",
    CellKind.OBSTACLE: "obstacle",
    CellKind.COLLAPSED: "collapsed",
    CellKind.SUPPLY: "supply",
}


def ratio(compression_level: int) -> int:
    return COMPRESSION_RATIOS[compression_level]


@dataclass(frozen=True)
class SemanticDescriptor:
    target_id: int
    attributes: tuple[tuple[AttributeKey, object], ...] = ()

    def __post_init__(self):
        keys = [k for k, _ in self.attributes]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate attribute keys")
        if keys != sorted(keys):
            raise ValueError("attributes must be in canonical key order")
        if keys and keys[0] != AttributeKey.CATEGORY:
            raise ValueError("a non-empty descriptor must carry Category")

    @classmethod
    def of(cls, target_id: int, attrs: Mapping[AttributeKey, object]) -> "SemanticDescriptor":
        return cls(target_id, tuple(sorted(attrs.items())))

    @property
    def empty(self) -> bool:
        return not self.attributes

    def as_dict(self) -> dict[AttributeKey, object]:
        return dict(self.attributes)

    def keys(self) -> list[AttributeKey]:
        return [k for k, _ in self.attributes]

    def __len__(self) -> int:
        return len(self.attributes)


@dataclass(frozen=True)
class SemanticMessage:
    msg_id: int
    source: int
    descriptor: SemanticDescriptor
    urgency: Urgency
    payload_bytes_raw: int
    compression_level: int
    created: int
    deadline: int
    reference_size: int
    subtask_id: int | None = None

    def __post_init__(self):
        if self.deadline <= self.created:
            raise ValueError("deadline must be after creation tick")
        if self.compression_level not in range(len(COMPRESSION_RATIOS)):
            raise ValueError(f"bad compression level {self.compression_level}")

    @property
    def payload_bytes_compressed(self) -> int:
        return math.ceil(self.payload_bytes_raw / ratio(self.compression_level))

    @property
    def deadline_window(self) -> int:
        return self.deadline - self.created


@dataclass
class KnowledgeBase:
    """Reference descriptors per ground-truth target."""

    references: dict[int, SemanticDescriptor] = field(default_factory=dict)
    positions: dict[int, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        for tid, d in self.references.items():
            if d.target_id != tid:
                raise ValueError(f"reference {tid} carries target id {d.target_id}")

    def __len__(self) -> int:
        return len(self.references)

    def reference(self, target_id: int) -> SemanticDescriptor:
        try:
            return self.references[target_id]
        except KeyError:
            raise KeyError(f"unknown target {target_id}") from None

    def target_at(self, cell: tuple[int, int]) -> int:
        for tid, pos in self.positions.items():
            if pos == cell:
                return tid
        raise KeyError(f"no target at {cell}")

    def subset(self, target_ids: Iterable[int]) -> "KnowledgeBase":
        ids = sorted(set(target_ids))
        return KnowledgeBase(
            {i: self.references[i] for i in ids},
            {i: self.positions[i] for i in ids},
        )

    def victims(self) -> "KnowledgeBase":
        return self.subset(
            tid for tid, d in self.references.items() if d.as_dict()[AttributeKey.CATEGORY] == "victim"
        )


def _victim_attributes(world: World, cell: tuple[int, int], idx: int) -> dict[AttributeKey, object]:
    wm = world.map
    rubble = sum(1 for n in wm.neighbours(cell) if wm[n] in (CellKind.COLLAPSED, CellKind.OBSTACLE))
    # Deterministic per-victim attributes; no RNG so worlds need not carry them.
    severity = SEVERITIES[(world.seed * 7 + idx * 3 + rubble) % len(SEVERITIES)]
    access = ACCESS[min(rubble, 2)] if cell not in world.unreachable else "blocked"
    confidence = CONFIDENCES[2 - min(rubble, 2)]
    return {
        AttributeKey.CATEGORY: "victim",
        AttributeKey.POSITION: cell,
        AttributeKey.SEVERITY: severity,
        AttributeKey.ACCESSIBILITY: access,
        AttributeKey.CONFIDENCE: confidence,
    }


def build_knowledge_base(world: World) -> KnowledgeBase:
    """Victims get ids 0..n-1 in row-major order, then map features."""
    refs: dict[int, SemanticDescriptor] = {}
    positions: dict[int, tuple[int, int]] = {}
    tid = 0
    for idx, cell in enumerate(world.map.cells_of(CellKind.VICTIM)):
        refs[tid] = SemanticDescriptor.of(tid, _victim_attributes(world, cell, idx))
        positions[tid] = cell
        tid += 1
    for kind in (CellKind.OBSTACLE, CellKind.COLLAPSED, CellKind.SUPPLY):
        for cell in world.map.cells_of(kind):
            refs[tid] = SemanticDescriptor.of(
                tid, {AttributeKey.CATEGORY: CATEGORY_OF[kind], AttributeKey.POSITION: cell}
            )
            positions[tid] = cell
            tid += 1
    return KnowledgeBase(refs, positions)


def compress(descriptor: SemanticDescriptor, compression_level: int) -> SemanticDescriptor:
    keep = KEEP_COUNT[compression_level]
    return SemanticDescriptor(descriptor.target_id, descriptor.attributes[:keep])


def encode(
    kb: KnowledgeBase,
    target_id: int,
    urgency: Urgency,
    compression_level: int,
    *,
    msg_id: int = 0,
    source: int = 0,
    tick: int = 0,
    deadline_ticks: int = 1,
    payload_bytes_raw: int | None = None,
    subtask_id: int | None = None,
) -> SemanticMessage:
    """Observe ``target_id`` and pack it into a message at the given compression."""
    reference = kb.reference(target_id)
    raw = RAW_PAYLOAD_BYTES[urgency] if payload_bytes_raw is None else payload_bytes_raw
    return SemanticMessage(
        msg_id=msg_id,
        source=source,
        descriptor=compress(reference, compression_level),
        urgency=Urgency(urgency),
        payload_bytes_raw=raw,
        compression_level=compression_level,
        created=tick,
        deadline=tick + deadline_ticks,
        reference_size=len(reference),
        subtask_id=subtask_id,
    )


def corrupt(msg: SemanticMessage, delivered: Iterable[bool], *, category_critical: bool = True) -> SemanticDescriptor:
    """Keep the attributes whose fragment arrived.

    Losing the Category fragment makes the message undecodable when
    ``category_critical`` is set; an empty descriptor is returned.
    """
    delivered = list(delivered)
    attrs = msg.descriptor.attributes
    if len(delivered) != len(attrs):
        raise ValueError(f"expected {len(attrs)} fragment outcomes, got {len(delivered)}")
    kept = tuple(a for a, ok in zip(attrs, delivered) if ok)
    if not kept or kept[0][0] != AttributeKey.CATEGORY:
        if category_critical or not kept:
            return SemanticDescriptor(msg.descriptor.target_id)
        # Header loss tolerated: keep the rest under an unknown category.
        kept = ((AttributeKey.CATEGORY, None),) + kept
    return SemanticDescriptor(msg.descriptor.target_id, kept)


def merge(current: SemanticDescriptor | None, update: SemanticDescriptor) -> SemanticDescriptor:
    """Receiver-side accumulation: newer attribute values overwrite older ones."""
    if update.empty:
        return current if current is not None else update
    if current is None or current.empty:
        return update
    attrs = current.as_dict()
    attrs.update(update.as_dict())
    return SemanticDescriptor.of(update.target_id, attrs)


def target_score(received: SemanticDescriptor | None, reference: SemanticDescriptor) -> float:
    if received is None or received.empty:
        return 0.0
    got = received.as_dict()
    matches = sum(1 for k, v in reference.attributes if k in got and got[k] == v)
    return matches / len(reference)


def consistency_score(
    received: Mapping[int, SemanticDescriptor] | Iterable[SemanticDescriptor],
    kb: KnowledgeBase,
) -> float:
    if len(kb) == 0:
        raise ValueError("consistency score undefined for an empty knowledge base")
    if not isinstance(received, Mapping):
        received = {d.target_id: d for d in received}
    total = sum(target_score(received.get(tid), ref) for tid, ref in kb.references.items())
    return total / len(kb)


def _fmt_value(v: object) -> str:
    if isinstance(v, tuple):
        return f"{v[0]},{v[1]}"
    return str(v)


def _parse_value(key: AttributeKey, s: str) -> object:
    if key == AttributeKey.POSITION:
        a, b = s.split(",")
        return (int(a), int(b))
    return s


def dumps_kb(kb: KnowledgeBase) -> str:
    lines = [f"ccein-kb {KB_FORMAT_VERSION}", f"targets {len(kb)}"]
    for tid in sorted(kb.references):
        d = kb.references[tid]
        x, y = kb.positions[tid]
        attrs = " ".join(f"{k.name.lower()}={_fmt_value(v)}" for k, v in d.attributes)
        lines.append(f"{tid} {x} {y} {attrs}")
    return "\n".join(lines) + "\n"


def loads_kb(text: str) -> KnowledgeBase:
    lines = text.splitlines()
    head = lines[0].split()
    if head[:1] != ["ccein-kb"] or int(head[1]) != KB_FORMAT_VERSION:
        raise ValueError(f"unsupported knowledge base header: {lines[0]!r}")
    n = int(lines[1].split()[1])
    refs, positions = {}, {}
    for line in lines[2:2 + n]:
        tid, x, y, *pairs = line.split()
        attrs = {}
        for pair in pairs:
            k, v = pair.split("=", 1)
            key = AttributeKey[k.upper()]
            attrs[key] = _parse_value(key, v)
        refs[int(tid)] = SemanticDescriptor.of(int(tid), attrs)
        positions[int(tid)] = (int(x), int(y))
    return KnowledgeBase(refs, positions)
