"""Actor-critic MLP with four categorical heads and hand-written backprop."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .mdp import NUM_CODING, NUM_COMPRESSION, NUM_POWER, STATE_DIM, CommState, TransmissionAction

HEAD_NAMES = ("channel", "power", "compression", "coding")


@dataclass(frozen=True)
class NetShape:
    num_channels: int = 4
    hidden: int = 64
    in_dim: int = STATE_DIM

    @property
    def head_sizes(self) -> tuple[int, ...]:
        return (self.num_channels, NUM_POWER, NUM_COMPRESSION, NUM_CODING)

    def blocks(self) -> list[tuple[str, tuple[int, ...]]]:
        out = [("w1", (self.hidden, self.in_dim)), ("b1", (self.hidden,))]
        for name, n in zip(HEAD_NAMES, self.head_sizes):
            out += [(f"w_{name}", (n, self.hidden)), (f"b_{name}", (n,))]
        out += [("w_value", (1, self.hidden)), ("b_value", (1,))]
        return out

    @property
    def size(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.blocks())

    def arch_hash(self) -> str:
        text = ";".join(f"{n}:{'x'.join(map(str, s))}" for n, s in self.blocks()) + ";tanh"
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def unpack(shape: NetShape, params: np.ndarray) -> dict[str, np.ndarray]:
    """Views into ``params`` keyed by block name."""
    if params.shape != (shape.size,):
        raise ValueError(f"expected {shape.size} parameters, got {params.shape}")
    out, i = {}, 0
    for name, s in shape.blocks():
        n = int(np.prod(s))
        out[name] = params[i:i + n].reshape(s)
        i += n
    return out


def init_params(shape: NetShape, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal init; small gains on the output heads keep early policies near uniform."""
    params = np.zeros(shape.size)
    views = unpack(shape, params)
    gains = {"w1": np.sqrt(2.0), "w_value": 1.0}
    for name, s in shape.blocks():
        if not name.startswith("w"):
            continue
        a = rng.standard_normal((max(s), min(s)))
        q, r = np.linalg.qr(a)
        q = q * np.sign(np.diag(r))
        if s[0] < s[1]:
            q = q.T
        views[name][...] = gains.get(name, 0.01) * q[: s[0], : s[1]]
    return params


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class Forward:
    x: np.ndarray
    h: np.ndarray
    logits: list[np.ndarray]
    value: np.ndarray

    @property
    def probs(self) -> list[np.ndarray]:
        return [softmax(z) for z in self.logits]

    def log_prob(self, actions: np.ndarray) -> np.ndarray:
        rows = np.arange(len(actions))
        return sum(log_softmax(z)[rows, actions[:, j]] for j, z in enumerate(self.logits))

    def entropy(self) -> np.ndarray:
        total = 0.0
        for z in self.logits:
            lp = log_softmax(z)
            total = total - (np.exp(lp) * lp).sum(axis=-1)
        return total

    def greedy(self) -> np.ndarray:
        # np.argmax returns the first maximum, so ties go to the lowest index.
        return np.stack([z.argmax(axis=-1) for z in self.logits], axis=1)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        cols = []
        for p in self.probs:
            u = rng.random((p.shape[0], 1))
            idx = (np.cumsum(p, axis=1) < u).sum(axis=1)
            cols.append(np.minimum(idx, p.shape[1] - 1))
        return np.stack(cols, axis=1)


def forward(shape: NetShape, params: np.ndarray, x: np.ndarray) -> Forward:
    w = unpack(shape, params)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    h = np.tanh(x @ w["w1"].T + w["b1"])
    logits = [h @ w[f"w_{n}"].T + w[f"b_{n}"] for n in HEAD_NAMES]
    value = (h @ w["w_value"].T + w["b_value"])[:, 0]
    return Forward(x, h, logits, value)


@dataclass
class PolicyNet:
    shape: NetShape
    params: np.ndarray

    @classmethod
    def create(cls, num_channels: int = 4, hidden: int = 64, seed: int = 0, zero: bool = False) -> "PolicyNet":
        shape = NetShape(num_channels, hidden)
        if zero:
            return cls(shape, np.zeros(shape.size))
        return cls(shape, init_params(shape, np.random.default_rng(seed)))

    def forward(self, x: np.ndarray) -> Forward:
        return forward(self.shape, self.params, x)

    def act(self, state: CommState) -> TransmissionAction:
        return TransmissionAction.from_indices(self.forward(state.vector()).greedy()[0])


def policy_forward(net: PolicyNet, state: CommState) -> tuple[list[np.ndarray], float]:
    """Head distributions and value for one state."""
    out = net.forward(state.vector())
    return [p[0] for p in out.probs], float(out.value[0])


@dataclass
class LossParts:
    total: float
    policy: float
    value: float
    entropy: float
    clip_frac: float
    approx_kl: float


def ppo_loss(
    shape: NetShape,
    params: np.ndarray,
    x: np.ndarray,
    actions: np.ndarray,
    old_logp: np.ndarray,
    adv: np.ndarray,
    returns: np.ndarray,
    *,
    clip: float,
    c_value: float,
    c_entropy: float,
    need_grad: bool = True,
) -> tuple[LossParts, np.ndarray | None]:
    """Total loss  -L_clip + c_v * MSE(V, R) - c_e * H  and its gradient."""
    fw = forward(shape, params, x)
    n = len(actions)
    logp = fw.log_prob(actions)
    ratio = np.exp(logp - old_logp)
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    surr = np.minimum(ratio * adv, clipped * adv)
    ent = fw.entropy()
    verr = fw.value - returns
    parts = LossParts(
        total=float(-surr.mean() + c_value * np.mean(verr ** 2) - c_entropy * ent.mean()),
        policy=float(-surr.mean()),
        value=float(np.mean(verr ** 2)),
        entropy=float(ent.mean()),
        clip_frac=float(np.mean(np.abs(ratio - 1.0) > clip)),
        approx_kl=float(np.mean(old_logp - logp)),
    )
    if not need_grad:
        return parts, None

    # The unclipped branch carries gradient unless the clipped one is strictly smaller.
    active = (ratio * adv <= clipped * adv) | ((ratio > 1.0 - clip) & (ratio < 1.0 + clip))
    d_logp = -(active * adv * ratio) / n
    w = unpack(shape, params)
    grad = np.zeros_like(params)
    g = unpack(shape, grad)
    rows = np.arange(n)
    dh = np.zeros_like(fw.h)
    for j, (name, z) in enumerate(zip(HEAD_NAMES, fw.logits)):
        lp = log_softmax(z)
        p = np.exp(lp)
        onehot = np.zeros_like(p)
        onehot[rows, actions[:, j]] = 1.0
        head_ent = -(p * lp).sum(axis=1, keepdims=True)
        dz = d_logp[:, None] * (onehot - p)
        # d(-c_e * mean H)/dz = c_e/n * p * (log p + H)
        dz += (c_entropy / n) * p * (lp + head_ent)
        g[f"w_{name}"][...] = dz.T @ fw.h
        g[f"b_{name}"][...] = dz.sum(axis=0)
        dh += dz @ w[f"w_{name}"]
    dv = (2.0 * c_value / n) * verr
    g["w_value"][...] = dv[None, :] @ fw.h
    g["b_value"][...] = dv.sum()
    dh += dv[:, None] @ w["w_value"]
    dpre = dh * (1.0 - fw.h ** 2)
    g["w1"][...] = dpre.T @ fw.x
    g["b1"][...] = dpre.sum(axis=0)
    return parts, grad
