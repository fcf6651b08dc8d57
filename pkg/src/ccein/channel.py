"""Degraded wireless link: Shannon capacity, logistic fragment loss, energy.

Interference between devices is folded into a per-sub-channel utilization
counter: a busy channel lowers the effective SINR by
``10*log10(1 + INR * utilization)``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

POWER_GRID_DBM = (0.0, 3.3, 6.6, 9.9, 13.1, 16.4, 19.7, 23.0)
P_MAX_DBM = POWER_GRID_DBM[-1]
BANDWIDTH_RANGE_MHZ = (50.0, 500.0)
SNR_RANGE_DB = (-10.0, 30.0)


class Coding(enum.IntEnum):
    ROBUST = 0
    EFFICIENT = 1


CODING_GAIN_DB = {Coding.ROBUST: 3.0, Coding.EFFICIENT: 0.0}
RATE_FACTOR = {Coding.ROBUST: 0.5, Coding.EFFICIENT: 1.0}


@dataclass(frozen=True)
class LinkParams:
    p_ref_dbm: float = 15.0
    slope_db: float = 3.0
    inr_db: float = 10.0
    tick_s: float = 0.1
    background_load_mhz: float = 40.0
    background_cap: float = 0.95
    loss_free: bool = False

    @property
    def inr_linear(self) -> float:
        return 10.0 ** (self.inr_db / 10.0)


@dataclass(frozen=True)
class ChannelState:
    snr_db: float
    bandwidth_mhz: float
    utilization: float = 0.0
    num_channels: int = 4
    channel_utilization: tuple[float, ...] | None = None

    def __post_init__(self):
        lo, hi = BANDWIDTH_RANGE_MHZ
        if not lo <= self.bandwidth_mhz <= hi:
            raise ValueError(f"bandwidth {self.bandwidth_mhz} MHz outside [{lo}, {hi}]")
        if not 0.0 <= self.utilization <= 1.0:
            raise ValueError("utilization must lie in [0, 1]")
        if self.num_channels < 1:
            raise ValueError("need at least one channel")
        if self.channel_utilization is not None and len(self.channel_utilization) != self.num_channels:
            raise ValueError("one utilization value per channel")

    def utilization_of(self, channel: int) -> float:
        if self.channel_utilization is None:
            return self.utilization
        return self.channel_utilization[channel]


@dataclass(frozen=True)
class BandwidthSchedule:
    breakpoints: tuple[tuple[int, float], ...] = ((0, 500.0),)

    def __post_init__(self):
        ticks = [t for t, _ in self.breakpoints]
        if not ticks or ticks != sorted(ticks):
            raise ValueError("breakpoints must be sorted by tick")
        lo, hi = BANDWIDTH_RANGE_MHZ
        for _, bw in self.breakpoints:
            if not lo <= bw <= hi:
                raise ValueError(f"bandwidth {bw} outside [{lo}, {hi}]")

    @classmethod
    def constant(cls, bandwidth_mhz: float) -> "BandwidthSchedule":
        return cls(((0, float(bandwidth_mhz)),))

    def at(self, tick: int) -> float:
        value = self.breakpoints[0][1]
        for start, bw in self.breakpoints:
            if start <= tick:
                value = bw
            else:
                break
        return value

    def changes(self) -> list[int]:
        return [t for t, _ in self.breakpoints]


@dataclass(frozen=True)
class LinkOutcome:
    delivered: tuple[bool, ...]
    transmit_time: int  # whole ticks the transmitter is busy
    energy_joules: float
    airtime_s: float = 0.0
    sinr_db: float = 0.0
    success_prob: float = 0.0
    channel: int = 0
    share: float = 1.0
    payload_bytes: int = 0
    power_dbm: float = 0.0

    def __post_init__(self):
        if self.transmit_time < 0 or self.energy_joules < 0:
            raise ValueError("transmit time and energy must be non-negative")

    @property
    def delivered_count(self) -> int:
        return sum(self.delivered)


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def shannon_rate(bandwidth_mhz, snr_db, share=1.0):
    """Rate in Mb/s of ``share`` of the band at the given SNR."""
    snr_lin = 10.0 ** (np.asarray(snr_db, dtype=float) / 10.0)
    return share * np.asarray(bandwidth_mhz, dtype=float) * np.log2(1.0 + snr_lin)


def capacity(state: ChannelState, share: float) -> float:
    if not 0.0 < share <= 1.0:
        raise ValueError("share must lie in (0, 1]")
    return float(shannon_rate(state.bandwidth_mhz, state.snr_db, share))


def sinr_db(snr_db, utilization, inr_db: float = 10.0):
    inr = 10.0 ** (inr_db / 10.0)
    return np.asarray(snr_db, dtype=float) - 10.0 * np.log10(1.0 + inr * np.asarray(utilization, dtype=float))


def background_utilization(bandwidth_mhz, params: LinkParams = LinkParams()):
    """Fraction of a sub-channel occupied by traffic outside the team."""
    return np.minimum(params.background_cap, params.background_load_mhz / np.asarray(bandwidth_mhz, dtype=float))


def logistic(x):
    x = np.asarray(x, dtype=float)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def fragment_success_prob(snr_db, power_dbm, coding, *, p_ref_dbm: float = 15.0, slope_db: float = 3.0):
    """Per-fragment delivery probability, logistic in the link margin.

    Works elementwise on arrays; ``coding`` may be an array of ``Coding`` values.
    """
    power = np.asarray(power_dbm, dtype=float)
    if np.any(power < 0.0) or np.any(power > P_MAX_DBM):
        raise ValueError("power must lie in [0, 23] dBm")
    gain = np.where(np.asarray(coding) == Coding.ROBUST, CODING_GAIN_DB[Coding.ROBUST], 0.0)
    margin = np.asarray(snr_db, dtype=float) + (power - p_ref_dbm) + gain
    p = logistic(margin / slope_db)
    return float(p) if np.ndim(p) == 0 else p


def link_budget(snr_db, utilization, bandwidth_mhz, power_dbm, coding, bits, num_channels, params: LinkParams):
    """Vectorised core shared by ``transmit`` and the training environment.

    Returns (success_prob, airtime_s, energy_j, sinr).
    """
    sinr = sinr_db(snr_db, utilization, params.inr_db)
    p = fragment_success_prob(sinr, power_dbm, coding, p_ref_dbm=params.p_ref_dbm, slope_db=params.slope_db)
    if params.loss_free:
        p = np.ones_like(np.asarray(p, dtype=float))
    rx_snr = sinr + (np.asarray(power_dbm, dtype=float) - params.p_ref_dbm)
    rate_factor = np.where(np.asarray(coding) == Coding.ROBUST, RATE_FACTOR[Coding.ROBUST], 1.0)
    rate_bps = shannon_rate(bandwidth_mhz, rx_snr, 1.0 / num_channels) * rate_factor * 1e6
    airtime = np.asarray(bits, dtype=float) / rate_bps
    energy = dbm_to_watts(power_dbm) * airtime
    return p, airtime, energy, sinr


def transmit(msg, action, state: ChannelState, rng: np.random.Generator, params: LinkParams = LinkParams()) -> LinkOutcome:
    """Send ``msg`` with ``action``; one Bernoulli draw per attribute fragment.

    ``action`` needs ``channel``, ``power_dbm`` and ``coding`` attributes.
    """
    if not 0 <= action.channel < state.num_channels:
        raise IndexError(f"channel {action.channel} out of range for K={state.num_channels}")
    bits = msg.payload_bytes_compressed * 8
    p, airtime, energy, sinr = link_budget(
        state.snr_db,
        state.utilization_of(action.channel),
        state.bandwidth_mhz,
        action.power_dbm,
        action.coding,
        bits,
        state.num_channels,
        params,
    )
    n = len(msg.descriptor)
    draws = rng.random(n)
    delivered = tuple(bool(u < p) for u in draws)
    airtime = float(airtime)
    return LinkOutcome(
        delivered=delivered,
        transmit_time=max(1, math.ceil(airtime / params.tick_s - 1e-12)),
        energy_joules=float(energy),
        airtime_s=airtime,
        sinr_db=float(sinr),
        success_prob=float(p),
        channel=action.channel,
        share=1.0 / state.num_channels,
        payload_bytes=msg.payload_bytes_compressed,
        power_dbm=float(action.power_dbm),
    )


@dataclass
class SnrProcess:
    """Per-link SNR: base value plus a bounded +-step random walk."""

    base_db: float
    step_db: float = 0.5
    bound_db: float = 3.0
    offset_db: float = 0.0
    lo: float = SNR_RANGE_DB[0] - 10.0
    hi: float = 60.0

    @property
    def value(self) -> float:
        return float(np.clip(self.base_db + self.offset_db, self.lo, self.hi))

    def step(self, rng: np.random.Generator) -> float:
        delta = self.step_db if rng.random() < 0.5 else -self.step_db
        self.offset_db = float(np.clip(self.offset_db + delta, -self.bound_db, self.bound_db))
        return self.value


@dataclass
class ChannelLoad:
    """Own-traffic occupancy per sub-channel, tracked per tick."""

    num_channels: int
    window: int = 10
    busy: dict[int, list[float]] = field(default_factory=dict)

    def record(self, channel: int, start_tick: int, airtime_s: float, tick_s: float) -> None:
        remaining = airtime_s
        t = start_tick
        while remaining > 1e-12:
            chunk = min(remaining, tick_s)
            self.busy.setdefault(t, [0.0] * self.num_channels)[channel] += chunk / tick_s
            remaining -= chunk
            t += 1

    def own(self, tick: int) -> list[float]:
        out = [0.0] * self.num_channels
        for t in range(tick - self.window + 1, tick + 1):
            row = self.busy.get(t)
            if row:
                for k in range(self.num_channels):
                    out[k] += min(1.0, row[k])
        return [v / self.window for v in out]

    def prune(self, tick: int) -> None:
        for t in [t for t in self.busy if t < tick - self.window]:
            del self.busy[t]


def channel_utilization(bandwidth_mhz: float, own: Sequence[float], params: LinkParams) -> tuple[float, ...]:
    bg = float(background_utilization(bandwidth_mhz, params))
    return tuple(min(1.0, bg + u) for u in own)
