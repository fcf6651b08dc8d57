"""Reference controllers the learned policy is compared against."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..channel import Coding
from ..semantics import Urgency
from .mdp import CommState, TransmissionAction

STATIC_ACTION = TransmissionAction(channel=0, power_level=4, compression_level=1, coding=Coding.EFFICIENT)


def baseline_static(state: CommState | None = None) -> TransmissionAction:
    return STATIC_ACTION


def least_utilized(channel_utilization: Sequence[float] | None) -> int:
    if not channel_utilization:
        return 0
    return int(np.argmin(np.asarray(channel_utilization)))


def baseline_greedy(state: CommState, channel_utilization: Sequence[float] | None = None) -> TransmissionAction:
    """Urgency rule: spend on Critical, save on Deferred."""
    ch = least_utilized(channel_utilization)
    if state.urgency == Urgency.CRITICAL:
        return TransmissionAction(ch, 7, 0, Coding.ROBUST)
    if state.urgency == Urgency.NORMAL:
        return TransmissionAction(ch, 4, 1, Coding.EFFICIENT)
    return TransmissionAction(ch, 0, 3, Coding.EFFICIENT)


def static_batch(obs: np.ndarray) -> np.ndarray:
    return np.tile(np.array(STATIC_ACTION.indices()), (len(obs), 1))


def greedy_batch(obs: np.ndarray) -> np.ndarray:
    """Greedy rule on observation rows; per-channel load is unseen, so channel 0."""
    u = obs[:, :3].argmax(axis=1)
    table = np.array([[0, 7, 0, 0], [0, 4, 1, 1], [0, 0, 3, 1]])
    return table[u]
