"""Versioned plain-text policy checkpoints."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .policy import NetShape, PolicyNet

FORMAT = "ccein-policy"
VERSION = 1


@dataclass
class Checkpoint:
    net: PolicyNet
    seed: int
    config_digest: str
    iteration: int = 0
    score: float = float("nan")
    adam_t: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None


def _vec(lines: list[str], values: np.ndarray | None, name: str) -> None:
    if values is None:
        lines.append(f"{name} 0")
        return
    lines.append(f"{name} {len(values)}")
    lines.extend(repr(float(v)) for v in values)


def dumps(ck: Checkpoint) -> str:
    shape = ck.net.shape
    lines = [
        f"{FORMAT} {VERSION}",
        f"arch {shape.arch_hash()} in {shape.in_dim} hidden {shape.hidden} channels {shape.num_channels}",
        f"seed {ck.seed}",
        f"config {ck.config_digest}",
        f"iteration {ck.iteration}",
        f"score {ck.score!r}",
        f"adam_t {ck.adam_t}",
    ]
    _vec(lines, ck.net.params, "params")
    _vec(lines, ck.adam_m, "adam_m")
    _vec(lines, ck.adam_v, "adam_v")
    return "\n".join(lines) + "\n"


def loads(text: str) -> Checkpoint:
    lines = text.splitlines()
    head = lines[0].split()
    if head != [FORMAT, str(VERSION)]:
        raise ValueError(f"not a version-{VERSION} policy checkpoint: {lines[0]!r}")
    arch = lines[1].split()
    meta = dict(zip(arch[2::2], (int(v) for v in arch[3::2])))
    shape = NetShape(meta["channels"], meta["hidden"], meta["in"])
    if shape.arch_hash() != arch[1]:
        raise ValueError("architecture hash mismatch")
    fields = {}
    for line in lines[2:7]:
        k, v = line.split(" ", 1)
        fields[k] = v
    vectors = {}
    i = 7
    while i < len(lines):
        name, count = lines[i].split()
        n = int(count)
        vectors[name] = np.array([float(v) for v in lines[i + 1:i + 1 + n]]) if n else None
        i += 1 + n
    params = vectors["params"]
    if params is None or len(params) != shape.size:
        raise ValueError("parameter count does not match architecture")
    return Checkpoint(
        net=PolicyNet(shape, params),
        seed=int(fields["seed"]),
        config_digest=fields["config"],
        iteration=int(fields["iteration"]),
        score=float(fields["score"]),
        adam_t=int(fields["adam_t"]),
        adam_m=vectors.get("adam_m"),
        adam_v=vectors.get("adam_v"),
    )


def save(ck: Checkpoint, path: str | Path) -> None:
    Path(path).write_text(dumps(ck))


def load(path: str | Path) -> Checkpoint:
    return loads(Path(path).read_text())
