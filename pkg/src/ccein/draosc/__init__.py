"""Adaptive transmission control: MDP, PPO policy, baselines."""

from .baselines import baseline_greedy, baseline_static
from .mdp import (
    CommState,
    Decision,
    RewardWeights,
    TransmissionAction,
    defer_gate,
    expected_reward_terms,
    reward,
    reward_terms,
)
from .policy import NetShape, PolicyNet, policy_forward, ppo_loss
from .ppo import PPOConfig, RolloutBatch, evaluate_policy, gae, ppo_update, train

__all__ = [
    "CommState", "Decision", "NetShape", "PPOConfig", "PolicyNet", "RewardWeights", "RolloutBatch",
    "TransmissionAction", "baseline_greedy", "baseline_static", "defer_gate", "evaluate_policy",
    "expected_reward_terms", "gae", "policy_forward", "ppo_loss", "ppo_update", "reward", "reward_terms", "train",
]
