"""Acceptance gate: one test and one PASS/FAIL line per criterion.

Criteria 1 to 4 evaluate the shipped checkpoint on the default config and take
a few minutes. Set CCEIN_ACCEPT_TRAIN=1 to also retrain from scratch and check
the training budget (about five minutes on one core).
"""

import itertools
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from ccein import cli, experiments
from ccein.channel import BandwidthSchedule
from ccein.cohesive import Capability, ConflictKind, Plan, Subtask, allocate, detect_conflicts, resolve
from ccein.config import data_path, load
from ccein.draosc.policy import NetShape, forward, init_params
from ccein.draosc.ppo import gae, ppo_loss
from ccein.engine import run_episode
from ccein.indec import (
    CNNShape,
    PatchClass,
    TinyCNN,
    activation_gradient,
    center_mass_wins,
    grad_cam,
    loads_cnn,
    synthetic_patch,
    unpack,
)
from ccein.indec import forward as cnn_forward
from ccein.scenario import CellKind, Device, DeviceKind, World, WorldMap, generate
from ccein.semantics import Urgency

import oracles

CFG = load()


@pytest.fixture(scope="module")
def schemes():
    return {name: experiments.make_scheme(name, CFG) for name in ("adaptive", "greedy", "static")}


@pytest.fixture(scope="module")
def eval_runs(schemes):
    start = time.perf_counter()
    cache = experiments.OracleCache()
    runs = {name: experiments.evaluate(CFG, s, CFG.eval_seeds, oracle=cache) for name, s in schemes.items()}
    return {name: experiments.summarize(r) for name, r in runs.items()}, time.perf_counter() - start


def test_criterion_1_task_completion(eval_runs, report):
    summary, elapsed = eval_runs
    tcr = {k: v["tcr"] for k, v in summary.items()}
    ok = tcr["adaptive"] > tcr["greedy"] > tcr["static"] and tcr["adaptive"] - tcr["static"] >= 0.05 and elapsed <= 600
    detail = ", ".join(f"{k} {v:.3f}" for k, v in tcr.items()) + f" over {len(CFG.eval_seeds)} seeds in {elapsed:.0f}s"
    assert report(1, ok, "TCR " + detail)


@pytest.mark.skipif(os.environ.get("CCEIN_ACCEPT_TRAIN") != "1", reason="set CCEIN_ACCEPT_TRAIN=1 to retrain")
def test_criterion_1_training_budget(tmp_path, report):
    start = time.perf_counter()
    assert cli.main(["train", "--seed", "0", "--out", str(tmp_path / "t"), "--quiet"]) == 0
    elapsed = time.perf_counter() - start
    scheme = experiments.make_scheme("adaptive", CFG, tmp_path / "t" / "artifacts" / "policy.txt")
    tcr = experiments.summarize(experiments.evaluate(CFG, scheme, CFG.eval_seeds))["tcr"]
    assert report(1, elapsed <= 3600, f"retraining took {elapsed:.0f}s, retrained adaptive TCR {tcr:.3f}")


def test_criterion_2_transmission_efficiency(eval_runs, report):
    summary, _ = eval_runs
    te = {k: v["te_norm"] for k, v in summary.items()}
    ok = te["adaptive"] >= te["static"] + 0.20
    assert report(2, ok, f"te_norm adaptive {te['adaptive']:.3f} vs static {te['static']:.3f}")


def _static_powers(bandwidths, seeds):
    scheme = experiments.make_scheme("static", CFG)
    powers = set()
    for bw in bandwidths:
        engine = replace(CFG.engine, bandwidth=BandwidthSchedule.constant(bw), record_trace=False)
        for seed in seeds:
            scen = replace(CFG.scenario_for(seed), bandwidth_schedule=((0, bw),))
            powers |= {t.power_dbm for t in run_episode(generate(scen), scheme, engine, seed).transmissions}
    return powers


def test_criterion_3_power_vs_bandwidth(schemes, report):
    bws = CFG.bandwidths
    points = experiments.sweep_bandwidth(CFG, schemes["adaptive"], CFG.sweep_seeds, bws)
    power = [p.mean for p in points]
    rho = oracles.spearman(list(bws), power)
    drop = power[0] - power[-1]
    static = _static_powers(bws, CFG.sweep_seeds)
    ok = rho <= -0.8 and drop >= 3.0 and len(static) == 1
    detail = f"spearman {rho:.3f}, {bws[0]:g}->{bws[-1]:g} MHz drop {drop:.2f} dB, static powers {sorted(static)}"
    assert report(3, ok, detail)


def test_criterion_4_consistency_vs_snr(schemes, report):
    snrs = CFG.snrs
    ad = experiments.sweep_snr(CFG, schemes["adaptive"], CFG.sweep_seeds, snrs)
    st = experiments.sweep_snr(CFG, schemes["static"], CFG.sweep_seeds, snrs)
    rho = oracles.spearman(list(snrs), [p.mean for p in ad])
    every_point = all(a.mean >= s.mean for a, s in zip(ad, st))
    top = ad[-1].mean
    low_gap = ad[0].mean > st[0].mean
    groups = 0
    for i in range(len(CFG.sweep_seeds)):
        a = [p.per_seed[i] for p in ad]
        s = [p.per_seed[i] for p in st]
        groups += all(x >= y for x, y in zip(a, s)) and a[0] > s[0]
    ok = rho >= 0.9 and every_point and top >= 0.85 and low_gap and groups >= 4
    detail = (f"spearman {rho:.3f}, adaptive>=static everywhere {every_point}, SC@{snrs[-1]:g}dB {top:.3f}, "
              f"@{snrs[0]:g}dB {ad[0].mean:.3f}>{st[0].mean:.3f}, orderings hold on {groups}/{len(CFG.sweep_seeds)} seeds")
    assert report(4, ok, detail)


def test_criterion_5_ppo_gradient_and_gae(report):
    worst = 0.0
    kw = dict(clip=0.2, c_value=0.5, c_entropy=0.01)
    for seed in range(1, 4):
        shape = NetShape(3, 4)
        rng = np.random.default_rng(seed)
        params = init_params(shape, rng) + 0.3 * rng.standard_normal(shape.size)
        x = rng.random((4, 8))
        actions = np.stack([rng.integers(0, n, 4) for n in shape.head_sizes], axis=1)
        old = forward(shape, params, x).log_prob(actions) + rng.normal(0, 0.1, 4)
        adv, ret = rng.standard_normal(4), rng.standard_normal(4)
        _, grad = ppo_loss(shape, params, x, actions, old, adv, ret, **kw)

        def total(p):
            return ppo_loss(shape, np.array(p), x, actions, old, adv, ret, need_grad=False, **kw)[0].total

        fd = np.array(oracles.central_difference(total, params, eps=1e-6))
        worst = max(worst, float((np.abs(grad - fd) / np.maximum(1e-8, np.abs(grad) + np.abs(fd))).max()))
    r, v = [1.0, -0.5, 2.0], [0.3, 0.1, -0.2]
    gae_exact = all(
        list(gae(r, v, d, 0.99, 0.95, last_value=0.7)[0]) == oracles.gae_unrolled_3(r, v, d, 0.7, 0.99, 0.95)
        for d in itertools.product((0, 1), repeat=3)
    )
    assert report(5, worst < 1e-3 and gae_exact, f"max relative FD error {worst:.2e}, GAE exact {gae_exact}")


def _identity_net():
    shape = CNNShape(c1=1, c2=1, k1=1, k2=1, classes=4)
    params = np.zeros(shape.size)
    w = unpack(shape, params)
    w["w1"][...] = 1.0
    w["w2"][...] = 1.0
    w["wf"][0] = 1.0
    return TinyCNN(shape, params)


def test_criterion_6_grad_cam(report):
    small = CNNShape(c1=2, c2=3)
    worst = 0.0
    for cls in range(4):
        net = TinyCNN(small, 0.5 * np.random.default_rng(5).standard_normal(small.size))
        patch = np.random.default_rng(cls).random((8, 8))
        _, a2 = cnn_forward(net, patch)
        w = unpack(small, net.params)

        def score(flat):
            return float(w["wf"][cls] @ np.asarray(flat).reshape(a2.shape).mean(axis=(1, 2)) + w["bf"][cls])

        got = activation_gradient(net, patch, cls)
        fd = np.array(oracles.central_difference(score, a2.ravel(), eps=1e-4)).reshape(a2.shape)
        worst = max(worst, float((np.abs(got - fd) / np.maximum(1e-8, np.abs(got) + np.abs(fd))).max()))

    patch = np.random.default_rng(2).random((16, 16)) * 2 - 1
    patch[5, 9] = 1.0
    identity = bool(np.array_equal(grad_cam(_identity_net(), patch, 0), np.maximum(patch, 0.0)))

    shipped = loads_cnn(data_path("classifier.txt").read_text())
    rng = np.random.default_rng(2024)
    wins = sum(
        center_mass_wins(grad_cam(shipped, synthetic_patch(PatchClass.VICTIM, rng), int(PatchClass.VICTIM)))
        for _ in range(100)
    )
    ok = worst < 1e-3 and identity and wins >= 80
    assert report(6, ok, f"max relative FD error {worst:.2e}, identity heatmap exact {identity}, center wins {wins}/100")


def test_criterion_7_allocation_is_optimal(report):
    rng = np.random.default_rng(7)
    devices = [Device(i, DeviceKind.DRONE, (0, 0), 1000.0, 1.0) for i in range(5)]
    grid = WorldMap(8, 8, tuple(tuple(CellKind.FREE for _ in range(8)) for _ in range(8)))
    world = World(0, grid, tuple(devices))
    subtasks = [Subtask(i, 0, Capability.AERIAL_SEARCH, (4, 4), Urgency.NORMAL, "x") for i in range(5)]
    exact = 0
    for i in range(200):
        # alternate continuous costs and small integers (many ties)
        cost = rng.random((5, 5)) * 100 if i % 2 else rng.integers(0, 4, (5, 5)).astype(float)
        res = allocate(subtasks, devices, world, cost_override=cost)
        exact += res.total_cost == oracles.brute_force_assignment(cost.tolist()) and len(res.pairs) == 5
    assert report(7, exact == 200, f"{exact}/200 matrices at the brute-force minimum")


def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_8_byte_identical_runs(tmp_path, monkeypatch, report):
    commands = {
        "scenario": ["scenario", "--seed", "2"],
        "train": ["train", "--iterations", "2"],
        "eval": ["eval", "adaptive", "--seeds", "1,2"],
        "explain": None,  # filled in from the eval run's first observation
    }
    trees: dict[str, list] = {k: [] for k in commands}
    for d in ("first", "second"):
        (tmp_path / d).mkdir()
        monkeypatch.chdir(tmp_path / d)
        for name, argv in commands.items():
            if name == "explain":
                text = Path("eval/artifacts/observations.txt").read_text()
                seed, ob = cli.loads_observations(text)[0]
                argv = ["explain", "eval", "--seed", str(seed), "--device", str(ob.device), "--tick", str(ob.tick)]
            assert cli.main([*argv, "--out", name, "--quiet"]) == 0
            trees[name].append(_tree(tmp_path / d / name))
    same = {name: t[0] == t[1] for name, t in trees.items()}
    sizes = {name: len(t[0]) for name, t in trees.items()}
    ok = all(same.values())
    detail = ", ".join(f"{k} {'identical' if v else 'DIFFERS'} ({sizes[k]} files)" for k, v in same.items())
    assert report(8, ok, detail)


def test_criterion_9_corridor_conflict(report):
    # two vehicles walk toward each other along row 0 and both enter (3, 0) on tick 3
    a = [(t, (t, 0)) for t in range(1, 6)]
    b = [(t, (6 - t, 0)) for t in range(1, 6)]
    plan = Plan.build(
        paths={0: a, 1: b},
        kinds={0: DeviceKind.VEHICLE, 1: DeviceKind.VEHICLE},
        urgency={0: Urgency.NORMAL, 1: Urgency.CRITICAL},
    )
    found = detect_conflicts(plan)
    one = len(found) == 1 and found[0].kind == ConflictKind.SPATIAL and found[0].cell == (3, 0)
    once = resolve(found, plan)
    critical_proceeds = once.path(1) == plan.path(1) and once.path(0) != plan.path(0)
    idempotent = resolve(found, once) == once
    ok = one and critical_proceeds and idempotent
    assert report(9, ok, f"conflicts {len(found)}, Critical path unchanged {critical_proceeds}, idempotent {idempotent}")
