"""PPO with clipped surrogate, GAE and evaluator-based checkpoint selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..optim import Adam
from .env import CommEnv, EnvConfig
from .policy import LossParts, PolicyNet, ppo_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    learning_rate: float = 3e-4
    epochs: int = 4
    minibatch_size: int = 256
    rollout_length: int = 64
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    iterations: int = 400
    eval_interval: int = 20
    max_grad_norm: float = 0.5
    eval_seeds: tuple[int, ...] = (10_001, 10_002, 10_003, 10_004)
    eval_episodes: int = 64

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ValueError("gamma and lambda must lie in [0, 1]")
        if self.minibatch_size < 1 or self.epochs < 1 or self.rollout_length < 1:
            raise ValueError("epochs, minibatch size and rollout length must be positive")


def gae(rewards, values, dones, gamma: float, lam: float, last_value=0.0):
    """Generalised advantage estimation along axis 0.

    ``dones[t]`` marks that the episode ended after step t, so neither the
    bootstrap value nor later advantages leak across the boundary.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=float)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must have equal shapes")
    adv = np.zeros_like(rewards)
    running = np.zeros_like(rewards[0]) if rewards.ndim > 1 else 0.0
    next_value = np.asarray(last_value, dtype=float)
    for t in range(len(rewards) - 1, -1, -1):
        keep = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * keep - values[t]
        running = delta + gamma * lam * keep * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class RolloutBatch:
    states: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)


@dataclass
class UpdateStats:
    loss: float = 0.0
    policy: float = 0.0
    value: float = 0.0
    entropy: float = 0.0
    clip_frac: float = 0.0
    approx_kl: float = 0.0
    aborted: bool = False


def ppo_update(
    net: PolicyNet,
    batch: RolloutBatch,
    config: PPOConfig,
    optimizer: Adam,
    rng: np.random.Generator,
) -> tuple[PolicyNet, UpdateStats]:
    """Several epochs of minibatch Adam steps on the PPO loss."""
    params = net.params.copy()
    seen: list[LossParts] = []
    n = len(batch)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            parts, grad = ppo_loss(
                net.shape,
                params,
                batch.states[idx],
                batch.actions[idx],
                batch.logp[idx],
                batch.advantages[idx],
                batch.returns[idx],
                clip=config.clip,
                c_value=config.value_coef,
                c_entropy=config.entropy_coef,
            )
            if not np.isfinite(parts.total) or not np.all(np.isfinite(grad)):
                log.warning("non-finite PPO loss; update aborted")
                return net, UpdateStats(aborted=True)
            params = optimizer.step(params, grad)
            seen.append(parts)
    stats = UpdateStats(
        loss=float(np.mean([p.total for p in seen])),
        policy=float(np.mean([p.policy for p in seen])),
        value=float(np.mean([p.value for p in seen])),
        entropy=float(np.mean([p.entropy for p in seen])),
        clip_frac=float(np.mean([p.clip_frac for p in seen])),
        approx_kl=float(np.mean([p.approx_kl for p in seen])),
    )
    return PolicyNet(net.shape, params), stats


def collect_rollout(
    net: PolicyNet, env: CommEnv, config: PPOConfig, rng: np.random.Generator
) -> tuple[RolloutBatch, float]:
    """Sample ``rollout_length`` steps from every replica; returns batch and mean reward."""
    T, N = config.rollout_length, env.cfg.num_envs
    states = np.zeros((T, N, 8))
    actions = np.zeros((T, N, 4), dtype=int)
    logp = np.zeros((T, N))
    values = np.zeros((T, N))
    rewards = np.zeros((T, N))
    dones = np.zeros((T, N))
    obs = env.observe()
    for t in range(T):
        fw = net.forward(obs)
        a = fw.sample(rng)
        states[t], actions[t], logp[t], values[t] = obs, a, fw.log_prob(a), fw.value
        obs, rewards[t], dones[t], _ = env.step(a)
    last_value = net.forward(obs).value
    adv, ret = gae(rewards, values, dones, config.gamma, config.lam, last_value)
    flat_adv = adv.reshape(-1)
    flat_adv = (flat_adv - flat_adv.mean()) / (flat_adv.std() + 1e-8)
    batch = RolloutBatch(
        states.reshape(-1, 8), actions.reshape(-1, 4), logp.reshape(-1), flat_adv, ret.reshape(-1)
    )
    return batch, float(rewards.mean())


@dataclass
class EvalResult:
    score: float
    breakdown: dict[str, float] = field(default_factory=dict)


def evaluate_policy(
    net: PolicyNet,
    env_config: EnvConfig,
    seeds: tuple[int, ...],
    episodes: int = 64,
    *,
    action_fn=None,
) -> EvalResult:
    """Mean episodic expected return of greedy actions on held-out seeds.

    Rewards are taken in expectation over fragment loss, so the score only
    depends on the seeds and the parameters. ``action_fn`` overrides the
    network (maps an observation batch to action indices).
    """
    cfg = replace(env_config, num_envs=episodes, expected_reward=True)
    returns, probs, power, t_hat, e_hat = [], [], [], [], []
    for seed in seeds:
        env = CommEnv(cfg, seed)
        total = np.zeros(episodes)
        obs = env.observe()
        for _ in range(cfg.horizon):
            a = net.forward(obs).greedy() if action_fn is None else action_fn(obs)
            obs, r, _, info = env.step(a)
            total += r
            probs.append(info.success_prob)
            power.append(info.power_dbm)
            t_hat.append(info.t_hat)
            e_hat.append(info.e_hat)
        returns.append(total)
    score = float(np.mean(returns))
    return EvalResult(
        score,
        {
            "return": score,
            "success_prob": float(np.mean(probs)),
            "power_dbm": float(np.mean(power)),
            "latency": float(np.mean(t_hat)),
            "energy": float(np.mean(e_hat)),
        },
    )


@dataclass
class CurveRow:
    iteration: int
    mean_return: float
    eval_score: float
    entropy: float
    clip_frac: float


@dataclass
class TrainState:
    net: PolicyNet
    optimizer: Adam
    iteration: int = 0
    best_net: PolicyNet | None = None
    best_score: float = -np.inf
    curve: list[CurveRow] = field(default_factory=list)


def train(
    config: PPOConfig,
    env_config: EnvConfig,
    seed: int,
    *,
    state: TrainState | None = None,
    hidden: int = 64,
    on_eval=None,
) -> TrainState:
    """Train from scratch (or continue ``state``); keeps the best-scoring parameters.

    All randomness comes from ``seed`` and the iteration index, so a resumed
    run replays the same rollouts it would have seen uninterrupted.
    """
    if state is None:
        net = PolicyNet.create(env_config.num_channels, hidden, seed=seed)
        state = TrainState(net, Adam(lr=config.learning_rate, max_grad_norm=config.max_grad_norm))
    if set(config.eval_seeds) & {seed}:
        raise ValueError("evaluation seeds must be disjoint from the training seed")
    while state.iteration < config.iterations:
        it = state.iteration
        ss = np.random.SeedSequence([seed, it])
        env_seed, act_seed = ss.spawn(2)
        env = CommEnv(env_config, np.random.default_rng(env_seed).integers(2**63))
        rng = np.random.default_rng(act_seed)
        batch, mean_r = collect_rollout(state.net, env, config, rng)
        state.net, stats = ppo_update(state.net, batch, config, state.optimizer, rng)
        state.iteration += 1
        score = float("nan")
        if state.iteration % config.eval_interval == 0 or state.iteration == config.iterations:
            score = evaluate_policy(state.net, env_config, config.eval_seeds, config.eval_episodes).score
            if score > state.best_score:
                state.best_score = score
                state.best_net = PolicyNet(state.net.shape, state.net.params.copy())
            if on_eval is not None:
                on_eval(state, score)
        state.curve.append(CurveRow(state.iteration, mean_r, score, stats.entropy, stats.clip_frac))
    if state.best_net is None:
        # no evaluation happened (zero iterations): score what we have
        state.best_score = evaluate_policy(state.net, env_config, config.eval_seeds, config.eval_episodes).score
        state.best_net = PolicyNet(state.net.shape, state.net.params.copy())
    return state
