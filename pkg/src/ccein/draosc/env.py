"""Vectorised per-transmission environment used for PPO training and scoring.

Each replica is one device's radio: a message arrives, the policy picks an
action, the link formulas from ``channel`` decide what gets through. The
rescue world is not simulated here; only the link-level context is.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..channel import (
    BANDWIDTH_RANGE_MHZ,
    POWER_GRID_DBM,
    SNR_RANGE_DB,
    LinkParams,
    background_utilization,
    link_budget,
)
from ..semantics import COMPRESSION_RATIOS, KEEP_COUNT, RAW_PAYLOAD_BYTES, Urgency
from .mdp import QUEUE_CAP, URGENCY_MULT_ARRAY, RewardWeights, energy_fraction, expected_reward_terms, reward_terms

POWER_ARRAY = np.array(POWER_GRID_DBM)
RATIO_ARRAY = np.array(COMPRESSION_RATIOS, dtype=float)
KEEP_ARRAY = np.array(KEEP_COUNT)
RAW_ARRAY = np.array([RAW_PAYLOAD_BYTES[u] for u in Urgency], dtype=float)


@dataclass(frozen=True)
class EnvConfig:
    num_envs: int = 64
    horizon: int = 64
    num_channels: int = 4
    urgency_probs: tuple[float, float, float] = (0.3, 0.4, 0.3)
    snr_range_db: tuple[float, float] = SNR_RANGE_DB
    bandwidth_range_mhz: tuple[float, float] = BANDWIDTH_RANGE_MHZ
    snr_step_db: float = 0.5
    snr_bound_db: float = 3.0
    bandwidth_switch_prob: float = 0.02
    deadline_ticks: tuple[int, int, int] = (2, 5, 20)
    reference_attrs: tuple[int, int, int] = (5, 5, 2)
    own_decay: float = 0.9
    expected_reward: bool = False
    link: LinkParams = field(default_factory=LinkParams)
    weights: RewardWeights = field(default_factory=RewardWeights)


@dataclass
class StepInfo:
    success_prob: np.ndarray
    power_dbm: np.ndarray
    t_hat: np.ndarray
    e_hat: np.ndarray
    bandwidth_mhz: np.ndarray
    urgency: np.ndarray


class CommEnv:
    def __init__(self, config: EnvConfig, seed: int):
        self.cfg = config
        self.rng = np.random.default_rng(seed)
        n = config.num_envs
        self.t = np.zeros(n, dtype=int)
        self.base_snr = np.zeros(n)
        self.offset = np.zeros(n)
        self.bandwidth = np.zeros(n)
        self.own = np.zeros((n, config.num_channels))
        self.queue = np.zeros(n, dtype=int)
        self.battery = np.ones(n)
        self.urgency = np.zeros(n, dtype=int)
        self._reset(np.ones(n, dtype=bool))
        self._draw_messages()

    def _reset(self, mask: np.ndarray) -> None:
        k = int(mask.sum())
        if k == 0:
            return
        c, r = self.cfg, self.rng
        self.t[mask] = 0
        self.base_snr[mask] = r.uniform(*c.snr_range_db, size=k)
        self.offset[mask] = 0.0
        self.bandwidth[mask] = r.uniform(*c.bandwidth_range_mhz, size=k)
        self.own[mask] = 0.0
        self.queue[mask] = r.integers(0, QUEUE_CAP + 1, size=k)
        self.battery[mask] = r.uniform(0.3, 1.0, size=k)

    def _draw_messages(self) -> None:
        cum = np.cumsum(self.cfg.urgency_probs)
        self.urgency = np.minimum((self.rng.random(self.cfg.num_envs)[:, None] > cum).sum(axis=1), 2)

    @property
    def snr_db(self) -> np.ndarray:
        return self.base_snr + self.offset

    def utilization(self) -> np.ndarray:
        bg = background_utilization(self.bandwidth, self.cfg.link)
        return np.minimum(1.0, bg[:, None] + self.own)

    def observe(self) -> np.ndarray:
        c = self.cfg
        n = c.num_envs
        x = np.zeros((n, 8))
        x[np.arange(n), self.urgency] = 1.0
        lo, hi = SNR_RANGE_DB
        x[:, 3] = np.clip((self.snr_db - lo) / (hi - lo), 0.0, 1.0)
        lo, hi = BANDWIDTH_RANGE_MHZ
        x[:, 4] = np.clip((self.bandwidth - lo) / (hi - lo), 0.0, 1.0)
        x[:, 5] = self.utilization().mean(axis=1)
        x[:, 6] = self.queue / QUEUE_CAP
        x[:, 7] = self.battery
        return x

    def step(self, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, StepInfo]:
        """Apply one action per replica; returns (next_obs, reward, done, info)."""
        c, r = self.cfg, self.rng
        n = c.num_envs
        rows = np.arange(n)
        chan, plev, zlev, coding = (actions[:, j] for j in range(4))
        if np.any(chan >= c.num_channels) or np.any(chan < 0):
            raise IndexError("channel index out of range")
        power = POWER_ARRAY[plev]
        u = self.urgency
        util = self.utilization()[rows, chan]
        bits = RAW_ARRAY[u] / RATIO_ARRAY[zlev] * 8.0
        p, airtime, _, _ = link_budget(
            self.snr_db, util, self.bandwidth, power, coding, bits, c.num_channels, c.link
        )
        n_ref = np.array(c.reference_attrs)[u]
        n_sent = np.minimum(n_ref, KEEP_ARRAY[zlev])
        window_s = np.array(c.deadline_ticks, dtype=float)[u] * c.link.tick_s
        t_hat = airtime / window_s
        e_hat = energy_fraction(power)
        share = 1.0 / c.num_channels
        mult = URGENCY_MULT_ARRAY[u]
        if c.expected_reward:
            rew = expected_reward_terms(p, n_sent, n_ref, mult, t_hat, share, e_hat, c.weights)
        else:
            draws = r.random((n, 5)) < p[:, None]
            draws &= np.arange(5)[None, :] < n_sent[:, None]
            ok = draws.sum(axis=1)
            frac = np.where(draws[:, 0], ok / n_ref, 0.0)
            rew = reward_terms(frac, mult, t_hat, 1.0 - ok / n_sent, share, e_hat, c.weights)
        info = StepInfo(p, power, np.minimum(t_hat, 1.0), e_hat, self.bandwidth.copy(), u.copy())

        busy = np.minimum(1.0, airtime / c.link.tick_s)
        self.own *= c.own_decay
        self.own[rows, chan] += (1.0 - c.own_decay) * busy
        step = np.where(r.random(n) < 0.5, c.snr_step_db, -c.snr_step_db)
        self.offset = np.clip(self.offset + step, -c.snr_bound_db, c.snr_bound_db)
        switch = r.random(n) < c.bandwidth_switch_prob
        self.bandwidth = np.where(switch, r.uniform(*c.bandwidth_range_mhz, size=n), self.bandwidth)
        self.queue = np.clip(self.queue + r.integers(-1, 2, size=n), 0, QUEUE_CAP)
        self.battery = np.maximum(0.0, self.battery - 0.5 / c.horizon * e_hat)
        self.t += 1
        done = self.t >= c.horizon
        self._reset(done)
        self._draw_messages()
        return self.observe(), rew, done, info
