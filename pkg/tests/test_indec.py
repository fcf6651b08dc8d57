import json
from pathlib import Path

import numpy as np
import pytest

from ccein.config import data_path
from ccein.indec import (
    CNNShape,
    PatchClass,
    TinyCNN,
    accuracy,
    activation_gradient,
    bilinear_resize,
    center_mass_wins,
    cross_entropy,
    dumps_cnn,
    forward,
    grad_cam,
    grad_cam_raw,
    heatmap_csv,
    loads_cnn,
    make_dataset,
    overlay,
    synthetic_patch,
    to_pgm,
    train_tiny,
    unpack,
)

import oracles

GOLDEN = Path(__file__).parent / "golden"
SMALL = CNNShape(c1=2, c2=3)


def golden_params(size, seed):
    return 0.5 * np.random.default_rng(seed).standard_normal(size)


@pytest.fixture(scope="module")
def shipped():
    return loads_cnn(data_path("classifier.txt").read_text())


def identity_net():
    """1x1 convolutions with unit weights and a head that sums the single channel."""
    shape = CNNShape(c1=1, c2=1, k1=1, k2=1, classes=4)
    params = np.zeros(shape.size)
    w = unpack(shape, params)
    w["w1"][...] = 1.0
    w["w2"][...] = 1.0
    w["wf"][0] = 1.0
    return TinyCNN(shape, params)


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(0)
    params = golden_params(SMALL.size, 2)
    patch = rng.random((8, 8)) - 0.3
    logits, a2 = forward(TinyCNN(SMALL, params), patch)
    want, want_a2, _ = oracles.cnn_forward(params, patch.tolist(), c1=2, c2=3)
    np.testing.assert_allclose(logits, want, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(a2, want_a2, rtol=1e-12, atol=1e-14)


def test_forward_golden_logits():
    g = json.loads((GOLDEN / "cnn_forward.json").read_text())
    net = TinyCNN(CNNShape(), golden_params(CNNShape().size, g["seed"]))
    logits, _ = forward(net, np.array(g["patch"]))
    np.testing.assert_allclose(logits, g["logits"], rtol=1e-12, atol=1e-14)


def test_zero_patch_zero_bias_gives_zero_logits():
    logits, _ = forward(TinyCNN.create(0), np.zeros((16, 16)))
    assert logits.shape == (4,)
    np.testing.assert_array_equal(logits, 0.0)


def test_positive_homogeneity():
    net = TinyCNN.create(4)
    patch = np.random.default_rng(1).random((16, 16))
    _, a = forward(net, patch)
    _, a2 = forward(net, 2 * patch)
    np.testing.assert_allclose(a2, 2 * a, rtol=1e-12)


def test_patch_shape_checks():
    net = TinyCNN.create(0)
    with pytest.raises(ValueError):
        forward(net, np.zeros((7, 7)))
    with pytest.raises(ValueError):
        forward(net, np.zeros((8, 9)))
    with pytest.raises(ValueError):
        grad_cam(net, np.zeros((8, 8)), 4)


@pytest.mark.parametrize("cls", range(4))
def test_activation_gradient_matches_finite_differences(cls):
    net = TinyCNN(SMALL, golden_params(SMALL.size, 5))
    patch = np.random.default_rng(cls).random((8, 8))
    logits, a2 = forward(net, patch)
    got = activation_gradient(net, patch, cls)
    wf = unpack(SMALL, net.params)["wf"]
    bf = unpack(SMALL, net.params)["bf"]

    # the class score as a function of the target-layer activations
    def score(flat):
        a = np.asarray(flat).reshape(a2.shape)
        return float(wf[cls] @ a.mean(axis=(1, 2)) + bf[cls])

    assert score(a2.ravel()) == pytest.approx(logits[cls])
    fd = np.array(oracles.central_difference(score, a2.ravel(), eps=1e-4)).reshape(a2.shape)
    rel = np.abs(got - fd) / np.maximum(1e-8, np.abs(got) + np.abs(fd))
    assert rel.max() < 1e-3


def test_parameter_gradients_match_finite_differences():
    net = TinyCNN(SMALL, golden_params(SMALL.size, 6))
    patches, labels = make_dataset(4, 9, radius=4)
    _, grad = cross_entropy(net, patches, labels)

    def loss(p):
        return cross_entropy(TinyCNN(SMALL, np.asarray(p)), patches, labels)[0]

    fd = np.array(oracles.central_difference(loss, net.params, eps=1e-4))
    rel = np.abs(grad - fd) / np.maximum(1e-8, np.abs(grad) + np.abs(fd))
    assert rel.max() < 1e-3


def test_identity_network_heatmap_is_relu_patch():
    patch = np.random.default_rng(2).random((16, 16)) * 2 - 1
    patch[5, 9] = 1.0  # the maximum, so max-normalisation leaves values unchanged
    heat = grad_cam(identity_net(), patch, 0)
    np.testing.assert_array_equal(heat, np.maximum(patch, 0.0))


def test_dead_class_gives_zero_heatmap():
    net = TinyCNN.create(0)
    unpack(net.shape, net.params)["wf"][2] = 0.0
    heat = grad_cam(net, synthetic_patch(PatchClass.VICTIM, np.random.default_rng(0)), 2)
    assert not heat.any()


def test_heatmap_matches_closed_form():
    g = json.loads((GOLDEN / "cnn_forward.json").read_text())
    params = golden_params(CNNShape().size, g["seed"])
    want = oracles.grad_cam_same_size(params, g["patch"], 1)
    np.testing.assert_allclose(grad_cam(TinyCNN(CNNShape(), params), np.array(g["patch"]), 1), want, atol=1e-12)


def test_heatmap_range_invariant():
    rng = np.random.default_rng(0)
    for i in range(1000):
        net = TinyCNN(SMALL, rng.standard_normal(SMALL.size))
        heat = grad_cam(net, rng.random((8, 8)) * 2 - 0.5, int(rng.integers(4)))
        assert heat.shape == (8, 8)
        assert heat.min() >= 0.0 and heat.max() <= 1.0
        assert heat.max() in (0.0, 1.0)


def test_relu_filter_on_raw_grid():
    rng = np.random.default_rng(1)
    for _ in range(50):
        net = TinyCNN(SMALL, rng.standard_normal(SMALL.size))
        patch = rng.random((8, 8))
        raw = grad_cam_raw(net, patch, 0)
        heat = grad_cam(net, patch, 0)  # same grid: conv2 keeps the patch size
        assert not heat[raw <= 0].any()


def test_bilinear_corners_align():
    grid = np.array([[0.0, 1.0], [2.0, 3.0]])
    up = bilinear_resize(grid, (3, 3))
    np.testing.assert_allclose(up, [[0, 0.5, 1], [1, 1.5, 2], [2, 2.5, 3]])


def test_overlay_golden_file():
    g = json.loads((GOLDEN / "cnn_forward.json").read_text())
    net = TinyCNN(CNNShape(), golden_params(CNNShape().size, g["seed"]))
    patch = np.array(g["patch"])
    _, blended = overlay(grad_cam(net, patch, 0), patch)
    assert blended == (GOLDEN / "overlay_victim.pgm").read_text()


def test_zero_heatmap_overlay_equals_base():
    patch = synthetic_patch(PatchClass.SUPPLY, np.random.default_rng(0))
    base, blended = overlay(np.zeros_like(patch), patch, scale=2)
    assert base == blended
    assert base.splitlines()[:3] == ["P2", "30 30", "255"]


def test_pgm_and_csv_format():
    text = to_pgm(np.array([[0.0, 1.0], [0.5, 2.0]]))
    assert text == "P2\n2 2\n255\n0 255\n128 255\n"
    csv = heatmap_csv(np.array([[0.25, 1.0]]))
    assert csv == "row,col,value\n0,0,0.250000000000\n0,1,1.000000000000\n"


def test_center_mass_wins():
    h = np.zeros((15, 15))
    h[6:9, 6:9] = 1.0
    assert center_mass_wins(h)
    h[0:3, 0:3] = 1.0
    assert not center_mass_wins(h)


def test_cnn_text_roundtrip(shipped):
    text = dumps_cnn(shipped)
    back = loads_cnn(text)
    np.testing.assert_array_equal(back.params, shipped.params)
    with pytest.raises(ValueError):
        loads_cnn("ccein-cnn 2\n" + text.split("\n", 1)[1])


def test_single_class_dataset_is_learned_perfectly():
    patches, labels = make_dataset(64, 0, classes=(PatchClass.OBSTACLE,))
    net, _ = train_tiny(TinyCNN.create(1), patches, labels, 50, seed=1)
    assert accuracy(net, patches, labels) == 1.0


def test_training_reaches_ninety_percent():
    patches, labels = make_dataset(512, 3)
    net, losses = train_tiny(TinyCNN.create(3), patches, labels, 2000, seed=3, target_accuracy=0.9)
    assert len(losses) <= 2000
    assert accuracy(net, patches, labels) >= 0.9
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_shipped_classifier_accuracy(shipped):
    patches, labels = make_dataset(1000, 77)
    assert accuracy(shipped, patches, labels) >= 0.9


def test_class_sensitivity(shipped):
    rng = np.random.default_rng(5)
    differ = total = 0
    for i in range(100):
        patch = synthetic_patch(PatchClass(i % 4), rng)
        heats = [grad_cam(shipped, patch, c) for c in range(4)]
        for a in range(4):
            for b in range(a + 1, 4):
                total += 1
                differ += np.abs(heats[a] - heats[b]).sum() > 0
    assert differ / total >= 0.95
