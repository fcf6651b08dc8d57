"""Multi-seed evaluation, ablation and sweep drivers shared by the CLI and tests.

Every loop runs single-threaded in fixed (grid point, seed) order, so the
numbers are a deterministic function of the configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import BandwidthSchedule
from .config import Config
from .draosc import checkpoint
from .engine import (
    SCHEME_NAMES,
    AdaptiveScheme,
    EngineConfig,
    EpisodeResult,
    GreedyScheme,
    MinimalPayloadScheme,
    Scheme,
    StaticScheme,
    oracle_config,
    run_episode,
    run_with_oracle,
)
from .scenario import ConfigError, World, generate


class UnknownScheme(ValueError):
    pass


def load_policy(path: Path, cfg: Config):
    ck = checkpoint.load(path)
    if ck.net.shape.num_channels != cfg.engine.num_channels:
        raise ConfigError(
            "channel.num_channels",
            f"checkpoint {path} has {ck.net.shape.num_channels} channels, config has {cfg.engine.num_channels}",
        )
    return ck


def make_scheme(name: str, cfg: Config, checkpoint_path: Path | None = None) -> Scheme:
    """Scheme by name; ``adaptive`` loads ``checkpoint_path`` or the configured checkpoint."""
    if name == "static":
        return StaticScheme()
    if name == "greedy":
        return GreedyScheme()
    if name == "adaptive":
        path = checkpoint_path if checkpoint_path is not None else cfg.checkpoint_path()
        return AdaptiveScheme(load_policy(Path(path), cfg).net)
    raise UnknownScheme(f"unknown scheme {name!r}; valid names: {', '.join(SCHEME_NAMES)}")


@dataclass
class SeedRun:
    seed: int
    world: World
    result: EpisodeResult
    oracle_te: float


class OracleCache:
    """Same-seed idealised TE reference, computed once per (seed, engine config)."""

    def __init__(self):
        self._cache: dict[tuple, float] = {}

    def get(self, world: World, config: EngineConfig, seed: int) -> float:
        key = (seed, repr(config))
        if key not in self._cache:
            ref = run_episode(world, MinimalPayloadScheme(), replace(oracle_config(config), record_trace=False), seed)
            self._cache[key] = ref.metrics.te_raw
        return self._cache[key]


def evaluate(
    cfg: Config,
    scheme: Scheme,
    seeds: Sequence[int],
    *,
    record_trace: bool = False,
    oracle: OracleCache | None = None,
) -> list[SeedRun]:
    oracle = oracle or OracleCache()
    engine = replace(cfg.engine, record_trace=record_trace)
    runs = []
    for seed in seeds:
        world = generate(cfg.scenario_for(seed))
        te_ref = oracle.get(world, cfg.engine, seed)
        result, _ = run_with_oracle(world, scheme, engine, seed, te_ref)
        runs.append(SeedRun(seed, world, result, te_ref))
    return runs


def ablate(cfg: Config, schemes: Sequence[Scheme], seeds: Sequence[int]) -> dict[str, list[SeedRun]]:
    oracle = OracleCache()
    return {s.name: evaluate(cfg, s, seeds, oracle=oracle) for s in schemes}


@dataclass
class SweepPoint:
    level: float
    per_seed: list[float]  # one value per seed, NaN if the seed produced none
    mean: float
    std: float
    n: int


def sweep_bandwidth(cfg: Config, scheme: Scheme, seeds: Sequence[int], bandwidths: Sequence[float]) -> list[SweepPoint]:
    """Mean transmit power at each constant bandwidth, pooled over all transmissions of all seeds."""
    points = []
    for bw in bandwidths:
        engine = replace(cfg.engine, bandwidth=BandwidthSchedule.constant(float(bw)), record_trace=False)
        pooled: list[float] = []
        per_seed = []
        for seed in seeds:
            scen = replace(cfg.scenario_for(seed), bandwidth_schedule=((0, float(bw)),))
            result = run_episode(generate(scen), scheme, engine, seed)
            powers = [t.power_dbm for t in result.transmissions]
            pooled.extend(powers)
            per_seed.append(float(np.mean(powers)) if powers else float("nan"))
        arr = np.array(pooled)
        points.append(
            SweepPoint(
                float(bw),
                per_seed,
                float(arr.mean()) if arr.size else float("nan"),
                float(arr.std()) if arr.size else float("nan"),
                int(arr.size),
            )
        )
    return points


def sweep_snr(cfg: Config, scheme: Scheme, seeds: Sequence[int], snrs: Sequence[float]) -> list[SweepPoint]:
    """End-of-episode semantic consistency at each base SNR; one value per seed."""
    points = []
    for snr in snrs:
        engine = replace(cfg.engine, snr_db=float(snr), record_trace=False)
        per_seed = [run_episode(generate(cfg.scenario_for(s)), scheme, engine, s).metrics.sc for s in seeds]
        arr = np.array(per_seed)
        points.append(SweepPoint(float(snr), per_seed, float(arr.mean()), float(arr.std()), len(per_seed)))
    return points


def summarize(runs: Sequence[SeedRun]) -> dict[str, float]:
    m = [r.result.metrics for r in runs]
    return {
        "tcr": float(np.mean([x.tcr for x in m])),
        "te_norm": float(np.mean([x.te_norm for x in m])),
        "te_raw": float(np.mean([x.te_raw for x in m])),
        "sc": float(np.mean([x.sc for x in m])),
        "mean_power_dbm": float(np.nanmean([x.mean_power_dbm for x in m])),
        "total_energy_j": float(np.mean([x.total_energy_j for x in m])),
        "transmitted_mb": float(np.mean([x.transmitted_mb for x in m])),
    }
