"""Per-transmission decision problem: state encoding, actions, reward, deferral."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from ..channel import BANDWIDTH_RANGE_MHZ, POWER_GRID_DBM, SNR_RANGE_DB, Coding, LinkOutcome
from ..semantics import AttributeKey, SemanticMessage, Urgency

STATE_DIM = 8
NUM_POWER = len(POWER_GRID_DBM)
NUM_COMPRESSION = 4
NUM_CODING = 2
URGENCY_MULTIPLIER = {Urgency.CRITICAL: 2.0, Urgency.NORMAL: 1.0, Urgency.DEFERRED: 0.5}
URGENCY_MULT_ARRAY = np.array([2.0, 1.0, 0.5])
QUEUE_CAP = 10


def _affine(x: float, lo: float, hi: float) -> float:
    return float(np.clip((x - lo) / (hi - lo), 0.0, 1.0))


@dataclass(frozen=True)
class CommState:
    urgency: Urgency
    snr_norm: float
    bandwidth_norm: float
    utilization: float
    queue_len_norm: float
    battery_norm: float

    def __post_init__(self):
        for name in ("snr_norm", "bandwidth_norm", "utilization", "queue_len_norm", "battery_norm"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @classmethod
    def from_raw(
        cls,
        urgency: Urgency,
        snr_db: float,
        bandwidth_mhz: float,
        utilization: float,
        queue_len: int,
        battery_frac: float,
    ) -> "CommState":
        return cls(
            Urgency(urgency),
            _affine(snr_db, *SNR_RANGE_DB),
            _affine(bandwidth_mhz, *BANDWIDTH_RANGE_MHZ),
            float(np.clip(utilization, 0.0, 1.0)),
            min(queue_len, QUEUE_CAP) / QUEUE_CAP,
            float(np.clip(battery_frac, 0.0, 1.0)),
        )

    def vector(self) -> np.ndarray:
        onehot = [0.0, 0.0, 0.0]
        onehot[int(self.urgency)] = 1.0
        return np.array(
            onehot + [self.snr_norm, self.bandwidth_norm, self.utilization, self.queue_len_norm, self.battery_norm]
        )

    @classmethod
    def from_vector(cls, x: np.ndarray) -> "CommState":
        hot = np.flatnonzero(np.asarray(x[:3]) == 1.0)
        if len(hot) != 1 or np.count_nonzero(x[:3]) != 1:
            raise ValueError("urgency must be one-hot")
        return cls(Urgency(int(hot[0])), *(float(v) for v in x[3:8]))


@dataclass(frozen=True)
class TransmissionAction:
    channel: int
    power_level: int
    compression_level: int
    coding: Coding

    def __post_init__(self):
        if self.channel < 0:
            raise ValueError("channel index must be non-negative")
        if not 0 <= self.power_level < NUM_POWER:
            raise ValueError(f"power level {self.power_level} out of range")
        if not 0 <= self.compression_level < NUM_COMPRESSION:
            raise ValueError(f"compression level {self.compression_level} out of range")
        object.__setattr__(self, "coding", Coding(self.coding))

    @property
    def power_dbm(self) -> float:
        return POWER_GRID_DBM[self.power_level]

    def indices(self) -> tuple[int, int, int, int]:
        return (self.channel, self.power_level, self.compression_level, int(self.coding))

    @classmethod
    def from_indices(cls, idx) -> "TransmissionAction":
        c, p, z, k = (int(v) for v in idx)
        return cls(c, p, z, Coding(k))


@dataclass(frozen=True)
class RewardWeights:
    w_success: float = 1.0
    w_latency: float = 0.2
    w_loss: float = 0.3
    w_bandwidth: float = 0.1
    w_energy: float = 0.2

    def __post_init__(self):
        if min(self.as_tuple()) < 0:
            raise ValueError("reward weights must be non-negative")
        if self.w_success <= 0:
            raise ValueError("w_success must be positive")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.w_success, self.w_latency, self.w_loss, self.w_bandwidth, self.w_energy)


def reward_terms(
    delivered_frac,
    multiplier,
    t_hat,
    lost_frac,
    share,
    e_hat,
    weights: RewardWeights = RewardWeights(),
):
    """The scalar reward from its normalized ingredients; works on arrays."""
    return (
        weights.w_success * delivered_frac * multiplier
        - weights.w_latency * np.minimum(t_hat, 1.0)
        - weights.w_loss * lost_frac
        - weights.w_bandwidth * share
        - weights.w_energy * e_hat
    )


def energy_fraction(power_dbm):
    """Energy relative to sending the same airtime at maximum power."""
    return 10.0 ** ((np.asarray(power_dbm, dtype=float) - POWER_GRID_DBM[-1]) / 10.0)


def reward(
    outcome: LinkOutcome,
    msg: SemanticMessage,
    state: CommState | None = None,
    weights: RewardWeights = RewardWeights(),
    *,
    tick_s: float = 0.1,
) -> float:
    attrs = msg.descriptor.attributes
    if len(outcome.delivered) != len(attrs):
        raise ValueError("outcome does not match message fragments")
    got = dict(zip((k for k, _ in attrs), outcome.delivered))
    n_ok = sum(outcome.delivered)
    delivered_frac = n_ok / msg.reference_size if got.get(AttributeKey.CATEGORY, False) else 0.0
    lost_frac = 1.0 - n_ok / len(attrs) if attrs else 0.0
    t_hat = outcome.airtime_s / (msg.deadline_window * tick_s)
    e_hat = float(energy_fraction(outcome.power_dbm))
    return float(
        reward_terms(delivered_frac, URGENCY_MULTIPLIER[msg.urgency], t_hat, lost_frac, outcome.share, e_hat, weights)
    )


def expected_reward_terms(p, n_sent, n_ref, multiplier, t_hat, share, e_hat, weights: RewardWeights = RewardWeights()):
    """Expectation of ``reward`` over independent per-fragment losses.

    Category travels first, so E[delivered_frac] = p * (1 + (n-1) p) / n_ref.
    """
    p = np.asarray(p, dtype=float)
    frac = p * (1.0 + (np.asarray(n_sent) - 1.0) * p) / np.asarray(n_ref, dtype=float)
    return reward_terms(frac, multiplier, t_hat, 1.0 - p, share, e_hat, weights)


class Decision(enum.Enum):
    TRANSMIT_NOW = "transmit_now"
    DEFER = "defer"


def defer_gate(
    state: CommState,
    msg: SemanticMessage,
    *,
    critical_queued: bool,
    now: int,
    threshold: float = 0.25,
    safety_margin: int = 2,
) -> Decision:
    """Hold Deferred traffic while the link is poor and Critical work waits."""
    if msg.urgency != Urgency.DEFERRED:
        return Decision.TRANSMIT_NOW
    if now >= msg.deadline - safety_margin:
        return Decision.TRANSMIT_NOW
    if state.snr_norm < threshold and critical_queued:
        return Decision.DEFER
    return Decision.TRANSMIT_NOW
