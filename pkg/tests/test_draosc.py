import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccein.channel import Coding, LinkParams
from ccein.draosc.baselines import STATIC_ACTION, baseline_greedy, baseline_static, greedy_batch, static_batch
from ccein.draosc.checkpoint import Checkpoint, dumps, loads
from ccein.draosc.env import CommEnv, EnvConfig
from ccein.draosc.mdp import (
    CommState,
    Decision,
    RewardWeights,
    TransmissionAction,
    defer_gate,
    expected_reward_terms,
    reward_terms,
)
from ccein.draosc.policy import NetShape, PolicyNet, forward, init_params, ppo_loss, softmax
from ccein.draosc.ppo import PPOConfig, RolloutBatch, evaluate_policy, gae, ppo_update, train
from ccein.optim import Adam
from ccein.scenario import ScenarioConfig, generate
from ccein.semantics import Urgency, build_knowledge_base, encode

import oracles

GOLDEN = Path(__file__).parent / "golden"


def golden_params(size, seed=7):
    return 0.5 * np.random.default_rng(seed).standard_normal(size)


def test_reward_hand_example():
    # Normal message, 4 of 5 fragments including Category
    r = reward_terms(4 / 5, 1.0, 0.5, 1 / 5, 0.25, 0.3, RewardWeights())
    assert r == pytest.approx(0.8 - 0.1 - 0.06 - 0.025 - 0.06)
    assert r == pytest.approx(0.555)


def test_reward_latency_is_capped():
    a = reward_terms(1.0, 1.0, 1.0, 0.0, 0.25, 0.1)
    b = reward_terms(1.0, 1.0, 7.0, 0.0, 0.25, 0.1)
    assert a == b


def test_expected_reward_matches_enumeration():
    p, n = 0.7, 4
    # enumerate all 2^n loss patterns; Category is fragment 0
    total = 0.0
    for bits in range(2 ** n):
        ok = [(bits >> i) & 1 for i in range(n)]
        prob = np.prod([p if b else 1 - p for b in ok])
        frac = sum(ok) / 5 if ok[0] else 0.0
        total += prob * reward_terms(frac, 2.0, 0.3, 1 - sum(ok) / n, 0.25, 0.5)
    assert expected_reward_terms(p, n, 5, 2.0, 0.3, 0.25, 0.5) == pytest.approx(total)


def test_weights_validation():
    with pytest.raises(ValueError):
        RewardWeights(w_energy=-0.1)
    with pytest.raises(ValueError):
        RewardWeights(w_success=0.0)


def test_state_vector_roundtrip():
    s = CommState(Urgency.NORMAL, 0.5, 0.25, 0.1, 0.3, 1.0)
    x = s.vector()
    assert x.shape == (8,) and list(x[:3]) == [0, 1, 0]
    assert CommState.from_vector(x) == s
    with pytest.raises(ValueError):
        CommState(Urgency.NORMAL, 1.5, 0.25, 0.1, 0.3, 1.0)


def test_action_validation():
    with pytest.raises(ValueError):
        TransmissionAction(0, 8, 0, Coding.ROBUST)
    with pytest.raises(ValueError):
        TransmissionAction(0, 0, 4, Coding.ROBUST)
    a = TransmissionAction(2, 7, 1, Coding.EFFICIENT)
    assert TransmissionAction.from_indices(a.indices()) == a
    assert a.power_dbm == 23.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=9))
def test_softmax_sums_to_one(z):
    p = softmax(np.array(z))
    assert p.sum() == pytest.approx(1.0)
    assert np.all(p >= 0)


def test_zero_init_is_uniform():
    net = PolicyNet.create(4, 16, zero=True)
    fw = net.forward(np.random.default_rng(0).random((3, 8)))
    for probs, n in zip(fw.probs, net.shape.head_sizes):
        np.testing.assert_allclose(probs, 1.0 / n)
    np.testing.assert_array_equal(fw.value, 0.0)


def test_forward_matches_loop_oracle():
    shape = NetShape(4, 6)
    params = golden_params(shape.size)
    blocks = oracles.unflatten_policy(params, 4, 6)
    x = np.random.default_rng(3).random((5, 8))
    fw = forward(shape, params, x)
    for i in range(5):
        heads, v = oracles.policy_forward(blocks, list(x[i]), oracles.HEADS)
        for got, want in zip(fw.probs, heads):
            np.testing.assert_allclose(got[i], want, rtol=1e-12)
        assert fw.value[i] == pytest.approx(v, rel=1e-12)


def test_forward_golden_file():
    g = json.loads((GOLDEN / "policy_forward.json").read_text())
    shape = NetShape(g["num_channels"], g["hidden"])
    fw = forward(shape, golden_params(shape.size, g["seed"]), np.array(g["state"]))
    for got, want in zip(fw.probs, g["probs"]):
        np.testing.assert_allclose(got[0], want, rtol=1e-12)
    assert fw.value[0] == pytest.approx(g["value"], rel=1e-12)


def test_gae_matches_hand_unroll():
    r, v = [1.0, -0.5, 2.0], [0.3, 0.1, -0.2]
    for done in ([0, 0, 0], [0, 1, 0], [1, 0, 1], [0, 0, 1]):
        adv, ret = gae(r, v, done, 0.99, 0.95, last_value=0.7)
        assert list(adv) == oracles.gae_unrolled_3(r, v, done, 0.7, 0.99, 0.95)
        np.testing.assert_array_equal(ret, adv + np.array(v))


def test_gae_base_cases():
    r, v = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.5, 0.5])
    adv, _ = gae(r, v, np.zeros(3), 0.9, 0.0, last_value=0.5)
    np.testing.assert_allclose(adv, r + 0.9 * 0.5 - v)  # lambda 0 is the one-step TD error
    adv, _ = gae(r, v, np.array([0, 0, 1.0]), 1.0, 1.0)
    np.testing.assert_allclose(adv, [6.0, 5.0, 3.0] - v)  # lambda 1 is the Monte Carlo return
    with pytest.raises(ValueError):
        gae(r, v[:2], np.zeros(3), 0.9, 0.9)


def test_gae_batched_columns_are_independent():
    rng = np.random.default_rng(0)
    r, v = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
    d = (rng.random((6, 3)) < 0.3).astype(float)
    adv, _ = gae(r, v, d, 0.99, 0.9, last_value=np.ones(3))
    for j in range(3):
        np.testing.assert_allclose(adv[:, j], gae(r[:, j], v[:, j], d[:, j], 0.99, 0.9, last_value=1.0)[0])


def _loss_problem(seed=1):
    shape = NetShape(3, 4)
    rng = np.random.default_rng(seed)
    params = init_params(shape, rng) + 0.3 * rng.standard_normal(shape.size)
    x = rng.random((4, 8))
    actions = np.stack([rng.integers(0, n, 4) for n in shape.head_sizes], axis=1)
    old = forward(shape, params, x).log_prob(actions) + rng.normal(0, 0.1, 4)
    adv = rng.standard_normal(4)
    ret = rng.standard_normal(4)
    return shape, params, x, actions, old, adv, ret


KW = dict(clip=0.2, c_value=0.5, c_entropy=0.01)


def test_ppo_loss_value_matches_oracle():
    shape, params, x, actions, old, adv, ret = _loss_problem()
    parts, _ = ppo_loss(shape, params, x, actions, old, adv, ret, need_grad=False, **KW)
    blocks = oracles.unflatten_policy(params, 3, 4)
    want = oracles.ppo_total_loss(blocks, x, actions, old, adv, ret, **KW)
    assert parts.total == pytest.approx(want, rel=1e-12)


@pytest.mark.parametrize("seed", [1, 2, 3])
def test_ppo_gradient_matches_finite_differences(seed):
    shape, params, x, actions, old, adv, ret = _loss_problem(seed)
    _, grad = ppo_loss(shape, params, x, actions, old, adv, ret, **KW)

    def f(p):
        return ppo_loss(shape, np.array(p), x, actions, old, adv, ret, need_grad=False, **KW)[0].total

    fd = np.array(oracles.central_difference(f, params, eps=1e-6))
    rel = np.abs(grad - fd) / np.maximum(1e-8, np.abs(grad) + np.abs(fd))
    assert rel.max() < 1e-3


def test_clipped_samples_carry_no_policy_gradient():
    shape, params, x, actions, _, _, ret = _loss_problem()
    logp = forward(shape, params, x).log_prob(actions)
    old = logp - 1.0  # ratio e > 1 + clip
    adv = np.ones(4)  # positive advantage: clipped branch is the min
    kw = dict(clip=0.2, c_value=0.0, c_entropy=0.0)
    parts, grad = ppo_loss(shape, params, x, actions, old, adv, ret, **kw)
    assert parts.clip_frac == 1.0
    np.testing.assert_array_equal(grad, 0.0)


def test_update_aborts_on_non_finite_loss():
    shape, params, x, actions, old, adv, ret = _loss_problem()
    net = PolicyNet(shape, params)
    batch = RolloutBatch(x, actions, old, adv, ret * np.nan)
    cfg = PPOConfig(minibatch_size=4, epochs=1)
    same, stats = ppo_update(net, batch, cfg, Adam(), np.random.default_rng(0))
    assert stats.aborted
    assert same is net


def test_evaluate_analytic_single_step():
    env = EnvConfig(
        horizon=1,
        urgency_probs=(1.0, 0.0, 0.0),
        link=LinkParams(loss_free=True),
        weights=RewardWeights(w_latency=0.0),
    )
    act = np.array([0, 7, 0, int(Coding.EFFICIENT)])
    res = evaluate_policy(PolicyNet.create(4, 8), env, (10_001,), 8, action_fn=lambda obs: np.tile(act, (len(obs), 1)))
    # Critical x2, all five attributes, share 1/4 at weight 0.1, full power energy at weight 0.2
    assert res.score == pytest.approx(2.0 - 0.025 - 0.2)


def test_env_is_seeded():
    cfg = EnvConfig(num_envs=8, horizon=5)
    a, b = CommEnv(cfg, 3), CommEnv(cfg, 3)
    acts = static_batch(a.observe())
    for _ in range(5):
        oa, ra, da, _ = a.step(acts)
        ob, rb, db, _ = b.step(acts)
        np.testing.assert_array_equal(oa, ob)
        np.testing.assert_array_equal(ra, rb)
        np.testing.assert_array_equal(da, db)


def test_baselines():
    s = CommState(Urgency.CRITICAL, 0.5, 0.5, 0.1, 0.0, 1.0)
    assert baseline_static(s) == STATIC_ACTION == TransmissionAction(0, 4, 1, Coding.EFFICIENT)
    assert baseline_greedy(s, [0.5, 0.1, 0.9]) == TransmissionAction(1, 7, 0, Coding.ROBUST)
    assert baseline_greedy(replace(s, urgency=Urgency.NORMAL)).indices() == (0, 4, 1, 1)
    assert baseline_greedy(replace(s, urgency=Urgency.DEFERRED)).indices() == (0, 0, 3, 1)
    obs = np.stack([replace(s, urgency=u).vector() for u in Urgency])
    rows = [baseline_greedy(replace(s, urgency=u)).indices() for u in Urgency]
    np.testing.assert_array_equal(greedy_batch(obs), rows)


@pytest.fixture(scope="module")
def deferred_msg():
    kb = build_knowledge_base(generate(ScenarioConfig(seed=1)))
    return encode(kb, 0, Urgency.DEFERRED, 0, tick=0, deadline_ticks=20)


def test_defer_gate(deferred_msg):
    poor = CommState(Urgency.DEFERRED, 0.1, 0.5, 0.1, 0.0, 1.0)
    good = replace(poor, snr_norm=0.8)
    assert defer_gate(poor, deferred_msg, critical_queued=True, now=0) == Decision.DEFER
    assert defer_gate(poor, deferred_msg, critical_queued=False, now=0) == Decision.TRANSMIT_NOW
    assert defer_gate(good, deferred_msg, critical_queued=True, now=0) == Decision.TRANSMIT_NOW
    # close to the deadline the message goes regardless
    assert defer_gate(poor, deferred_msg, critical_queued=True, now=deferred_msg.deadline - 2) == Decision.TRANSMIT_NOW


def test_defer_gate_never_holds_other_urgencies(deferred_msg):
    crit = replace(deferred_msg, urgency=Urgency.CRITICAL)
    poor = CommState(Urgency.CRITICAL, 0.0, 0.5, 0.1, 0.0, 1.0)
    assert defer_gate(poor, crit, critical_queued=True, now=0) == Decision.TRANSMIT_NOW


def test_checkpoint_roundtrip():
    net = PolicyNet.create(4, 8, seed=5)
    ck = Checkpoint(net, 5, "abc123", iteration=7, score=1.25, adam_t=3, adam_m=np.ones(net.shape.size))
    text = dumps(ck)
    back = loads(text)
    np.testing.assert_array_equal(back.net.params, net.params)
    assert back.adam_v is None and back.score == 1.25
    assert dumps(back) == text


def test_checkpoint_rejects_bad_header():
    text = dumps(Checkpoint(PolicyNet.create(4, 8), 0, "x"))
    with pytest.raises(ValueError):
        loads(text.replace("ccein-policy 1", "ccein-policy 2", 1))
    with pytest.raises(ValueError):
        loads(text.replace("hidden 8", "hidden 9", 1))


SMALL_PPO = PPOConfig(iterations=4, rollout_length=8, minibatch_size=64, epochs=2, eval_interval=2, eval_episodes=8,
                      learning_rate=1e-3)
SMALL_ENV = EnvConfig(num_envs=16, horizon=16, expected_reward=True)


def test_training_is_deterministic():
    a = train(SMALL_PPO, SMALL_ENV, seed=0, hidden=8)
    b = train(SMALL_PPO, SMALL_ENV, seed=0, hidden=8)
    np.testing.assert_array_equal(a.net.params, b.net.params)
    assert a.best_score == b.best_score


def test_resume_replays_uninterrupted_run():
    full = train(SMALL_PPO, SMALL_ENV, seed=0, hidden=8)
    half = train(replace(SMALL_PPO, iterations=2), SMALL_ENV, seed=0, hidden=8)
    resumed = train(SMALL_PPO, SMALL_ENV, seed=0, hidden=8, state=half)
    np.testing.assert_array_equal(resumed.net.params, full.net.params)


def test_training_rejects_eval_seed():
    with pytest.raises(ValueError):
        train(SMALL_PPO, SMALL_ENV, seed=10_001, hidden=8)


def test_zero_iterations_still_scores():
    st_ = train(replace(SMALL_PPO, iterations=0), SMALL_ENV, seed=0, hidden=8)
    assert np.isfinite(st_.best_score)


def test_training_improves_on_initial_policy():
    cfg = replace(SMALL_PPO, iterations=40, rollout_length=16, minibatch_size=128, eval_interval=10, eval_episodes=16)
    env = EnvConfig(num_envs=32, horizon=32, expected_reward=True)
    init = PolicyNet.create(4, 16, seed=1)
    before = evaluate_policy(init, env, cfg.eval_seeds, cfg.eval_episodes).score
    after = train(cfg, env, seed=1, hidden=16)
    assert after.best_score > before + 1.0
