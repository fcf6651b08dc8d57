"""Experiment configuration: one YAML file drives every subcommand.

A user file is merged over the packaged ``default.yaml``; any key that is
not in the packaged file is rejected with a ``ConfigError`` naming it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .channel import BandwidthSchedule, LinkParams
from .draosc.env import EnvConfig
from .draosc.mdp import RewardWeights
from .draosc.ppo import PPOConfig
from .engine import EngineConfig
from .scenario import ConfigError, DeviceKind, ScenarioConfig

DEFAULT_CONFIG = "default.yaml"
BUILTIN_CHECKPOINT = "builtin"


def data_path(name: str) -> Path:
    return Path(str(resources.files("ccein") / "data" / name))


def default_dict() -> dict[str, Any]:
    return yaml.safe_load(data_path(DEFAULT_CONFIG).read_text())


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        dotted = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(dotted, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected a mapping")
            out[key] = _merge(base[key], value, dotted + ".")
        else:
            out[key] = value
    return out


def digest_of(raw: dict) -> str:
    blob = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _num(raw: dict, key: str, path: str, kind=float):
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
    if kind is int and float(value) != int(value):
        raise ConfigError(f"{path}.{key}", f"expected an integer, got {value!r}")
    return kind(value)


def _int_list(raw: dict, key: str, path: str) -> tuple[int, ...]:
    value = raw[key]
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{path}.{key}", "expected a list of integers")
    return tuple(value)


def _float_list(raw: dict, key: str, path: str) -> tuple[float, ...]:
    value = raw[key]
    if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        raise ConfigError(f"{path}.{key}", "expected a list of numbers")
    return tuple(float(v) for v in value)


def _per_kind(raw: dict, key: str, kind) -> tuple:
    table = raw[key]
    out = []
    for dk in DeviceKind:
        if dk.value not in table:
            raise ConfigError(f"scenario.{key}.{dk.value}", "missing")
        out.append((dk, _num(table, dk.value, f"scenario.{key}", kind)))
    return tuple(out)


def _schedule(raw: dict) -> tuple[tuple[int, float], ...]:
    rows = raw["bandwidth_schedule"]
    try:
        return tuple((int(t), float(b)) for t, b in rows)
    except (TypeError, ValueError):
        raise ConfigError("channel.bandwidth_schedule", "expected a list of [tick, MHz] pairs") from None


@dataclass(frozen=True)
class Config:
    """Typed view of a merged configuration dictionary."""

    raw: dict
    scenario: ScenarioConfig
    engine: EngineConfig
    env: EnvConfig
    ppo: PPOConfig
    hidden: int
    checkpoint: str
    eval_seeds: tuple[int, ...]
    sweep_seeds: tuple[int, ...]
    bandwidths: tuple[float, ...]
    snrs: tuple[float, ...]
    classifier: str
    classifier_seed: int
    classifier_samples: int
    classifier_steps: int

    @property
    def digest(self) -> str:
        return digest_of(self.raw)

    def scenario_for(self, seed: int) -> ScenarioConfig:
        from dataclasses import replace

        return replace(self.scenario, seed=seed)

    def checkpoint_path(self, base: Path | None = None) -> Path:
        if self.checkpoint == BUILTIN_CHECKPOINT:
            return data_path("policy.txt")
        path = Path(self.checkpoint)
        if not path.is_absolute() and base is not None:
            path = base / path
        return path

    def classifier_path(self, base: Path | None = None) -> Path:
        if self.classifier == BUILTIN_CHECKPOINT:
            return data_path("classifier.txt")
        path = Path(self.classifier)
        if not path.is_absolute() and base is not None:
            path = base / path
        return path

    def dumps(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=None)


def build(raw: dict) -> Config:
    sc, ch, rw, en, po, tr, ev, sw, ex = (
        raw[k] for k in ("scenario", "channel", "reward", "engine", "policy", "train", "evaluation", "sweeps", "explain")
    )
    link = LinkParams(
        p_ref_dbm=_num(ch, "p_ref_dbm", "channel"),
        slope_db=_num(ch, "slope_db", "channel"),
        inr_db=_num(ch, "inr_db", "channel"),
        tick_s=_num(ch, "tick_s", "channel"),
        background_load_mhz=_num(ch, "background_load_mhz", "channel"),
        background_cap=_num(ch, "background_cap", "channel"),
    )
    if link.slope_db <= 0:
        raise ConfigError("channel.slope_db", "must be > 0")
    if link.tick_s <= 0:
        raise ConfigError("channel.tick_s", "must be > 0")
    try:
        weights = RewardWeights(**{k: _num(rw, k, "reward") for k in rw})
    except ValueError as exc:
        raise ConfigError("reward.w_success", str(exc)) from None
    schedule = _schedule(ch)
    scenario = ScenarioConfig(
        width=_num(sc, "width", "scenario", int),
        height=_num(sc, "height", "scenario", int),
        victims=_num(sc, "victims", "scenario", int),
        obstacles=_num(sc, "obstacles", "scenario", int),
        collapsed=_num(sc, "collapsed", "scenario", int),
        supplies=_num(sc, "supplies", "scenario", int),
        dropzones=_num(sc, "dropzones", "scenario", int),
        roster=_per_kind(sc, "devices", int),
        speeds=_per_kind(sc, "speeds", float),
        batteries=_per_kind(sc, "batteries", float),
        bandwidth_schedule=schedule,
        episode_ticks=_num(sc, "episode_ticks", "scenario", int),
    )
    scenario.validate()

    num_channels = _num(ch, "num_channels", "channel", int)
    if num_channels < 1:
        raise ConfigError("channel.num_channels", "must be >= 1")
    deadlines = _int_list(en, "deadline_ticks", "engine")
    if len(deadlines) != 3 or min(deadlines) < 1:
        raise ConfigError("engine.deadline_ticks", "expected three positive tick counts (Critical, Normal, Deferred)")
    receiver = en["receiver_model"]
    if receiver not in ("latest", "accumulate"):
        raise ConfigError("engine.receiver_model", f"expected 'latest' or 'accumulate', got {receiver!r}")
    failures = tuple(tuple(int(v) for v in row) for row in en["failures"])
    engine = EngineConfig(
        episode_ticks=scenario.episode_ticks,
        snr_db=_num(ch, "snr_db", "channel"),
        snr_step_db=_num(ch, "snr_step_db", "channel"),
        snr_bound_db=_num(ch, "snr_bound_db", "channel"),
        bandwidth=BandwidthSchedule(schedule),
        num_channels=num_channels,
        deadline_ticks=deadlines,
        map_update_period=_num(en, "map_update_period", "engine", int),
        map_update_radius=_num(en, "map_update_radius", "engine", int),
        work_ticks=_num(en, "work_ticks", "engine", int),
        subtask_timeout=_num(en, "subtask_timeout", "engine", int),
        arq=bool(en["arq"]),
        receiver_model=receiver,
        category_critical=bool(en["category_critical"]),
        defer_threshold=_num(en, "defer_threshold", "engine"),
        defer_margin=_num(en, "defer_margin", "engine", int),
        utilization_window=_num(en, "utilization_window", "engine", int),
        link=link,
        weights=weights,
        failures=failures,
        patch_radius=_num(en, "patch_radius", "engine", int),
    )

    te = tr["env"]
    probs = _float_list(te, "urgency_probs", "train.env")
    if len(probs) != 3 or abs(sum(probs) - 1.0) > 1e-9 or min(probs) < 0:
        raise ConfigError("train.env.urgency_probs", "expected three non-negative probabilities summing to 1")
    env = EnvConfig(
        num_envs=_num(te, "num_envs", "train.env", int),
        horizon=_num(tr, "rollout_length", "train", int),
        num_channels=num_channels,
        urgency_probs=probs,
        snr_step_db=_num(ch, "snr_step_db", "channel"),
        snr_bound_db=_num(ch, "snr_bound_db", "channel"),
        bandwidth_switch_prob=_num(te, "bandwidth_switch_prob", "train.env"),
        deadline_ticks=deadlines,
        reference_attrs=_int_list(te, "reference_attrs", "train.env"),
        own_decay=_num(te, "own_decay", "train.env"),
        expected_reward=bool(te["expected_reward"]),
        link=link,
        weights=weights,
    )
    floats = ("clip", "gamma", "lam", "learning_rate", "entropy_coef", "value_coef", "max_grad_norm")
    ints = ("epochs", "minibatch_size", "rollout_length", "iterations", "eval_interval", "eval_episodes")
    opts = {k: _num(tr, k, "train") for k in floats}
    opts.update({k: _num(tr, k, "train", int) for k in ints})
    if not 0 < opts["clip"] < 1:
        raise ConfigError("train.clip", "must lie in (0, 1)")
    for key in ("gamma", "lam"):
        if not 0 <= opts[key] <= 1:
            raise ConfigError(f"train.{key}", "must lie in [0, 1]")
    if opts["iterations"] < 0:
        raise ConfigError("train.iterations", "must be >= 0")
    for key in ("epochs", "minibatch_size", "rollout_length", "eval_interval", "eval_episodes"):
        if opts[key] < 1:
            raise ConfigError(f"train.{key}", "must be >= 1")
    ppo = PPOConfig(eval_seeds=_int_list(tr, "eval_seeds", "train"), **opts)

    hidden = _num(po, "hidden", "policy", int)
    if hidden < 1:
        raise ConfigError("policy.hidden", "must be >= 1")
    for key in ("bandwidths",):
        for bw in _float_list(sw, key, "sweeps"):
            if not 50.0 <= bw <= 500.0:
                raise ConfigError("sweeps.bandwidths", f"bandwidth {bw} outside [50, 500] MHz")
    return Config(
        raw=raw,
        scenario=scenario,
        engine=engine,
        env=env,
        ppo=ppo,
        hidden=hidden,
        checkpoint=str(po["checkpoint"]),
        eval_seeds=_int_list(ev, "seeds", "evaluation"),
        sweep_seeds=_int_list(sw, "seeds", "sweeps"),
        bandwidths=_float_list(sw, "bandwidths", "sweeps"),
        snrs=_float_list(sw, "snrs", "sweeps"),
        classifier=str(ex["classifier"]),
        classifier_seed=_num(ex, "classifier_seed", "explain", int),
        classifier_samples=_num(ex, "classifier_samples", "explain", int),
        classifier_steps=_num(ex, "classifier_steps", "explain", int),
    )


def loads(text: str) -> Config:
    try:
        user = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from None
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError("<file>", "top level must be a mapping")
    return build(_merge(default_dict(), user))


def load(path: str | Path | None = None) -> Config:
    """Load ``path`` over the packaged defaults; ``None`` gives the defaults."""
    if path is None:
        return build(default_dict())
    return loads(Path(path).read_text())
