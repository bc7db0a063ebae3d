import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guidedpert.gp import (VARIANTS, PerturbConfig, direction, make_pseudo_label, one_hot, perturb, refine,
                           reforward, softmax_seed_gradient)
from guidedpert.metrics import flip_analysis
from guidedpert.netcore import INPUT, backward_from_seed, forward, softmax

from conftest import micro_classifier, micro_dense_net


def probs_strategy(c):
    return st.lists(st.floats(0.01, 10.0), min_size=c, max_size=c).map(lambda v: np.array(v) / np.sum(v))


def test_gp_onehot():
    p = np.array([0.1, 0.7, 0.2])
    np.testing.assert_array_equal(make_pseudo_label(p, "gp_onehot"), [0, 1, 0])


def test_uniform_label():
    p = softmax(np.arange(4.0))
    np.testing.assert_array_equal(make_pseudo_label(p, "uniform_label"), [0.25] * 4)


def test_top2_label():
    np.testing.assert_array_equal(make_pseudo_label(np.array([0.5, 0.3, 0.2]), "top2_label"), [0.5, 0.5, 0])
    with pytest.raises(ValueError):
        make_pseudo_label(np.array([1.0]), "top2_label")


def test_random_onehot_is_seeded_and_row_major():
    p = np.full((3, 4, 5), 1 / 3)
    a = make_pseudo_label(p, "random_onehot", np.random.default_rng(3))
    b = make_pseudo_label(p, "random_onehot", np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    drawn = np.random.default_rng(3).integers(0, 3, size=(4, 5))
    np.testing.assert_array_equal(np.argmax(a, axis=0), drawn)
    assert np.all(a.sum(axis=0) == 1)


def test_ground_truth_oracle_label():
    p = np.full((2, 2, 2), 0.5)
    gt = np.array([[0, 1], [255, 1]])
    lab = make_pseudo_label(p, "ground_truth_oracle", ground_truth=gt)
    np.testing.assert_array_equal(lab[:, 0, 0], [1, 0])
    np.testing.assert_array_equal(lab[:, 1, 0], [0.5, 0.5])  # void: seed becomes zero
    with pytest.raises(ValueError):
        make_pseudo_label(p, "ground_truth_oracle")


def test_seed_examples():
    y = np.array([0.7, 0.2, 0.1])
    np.testing.assert_array_equal(softmax_seed_gradient(y, y.copy()) * 0, 0)
    assert np.all(softmax_seed_gradient(y, y) == 0)
    np.testing.assert_allclose(softmax_seed_gradient(y, np.array([1.0, 0, 0])), [0.21, -0.14, -0.07], atol=1e-15)
    with pytest.raises(ValueError):
        softmax_seed_gradient(y, np.ones(2) / 2)


def test_seed_unimodal_uniform_label_is_mirrored_gp():
    # five classes, one dominant: the uniform-label seed is GP's seed scaled by a negative number
    y = np.array([0.8, 0.05, 0.05, 0.05, 0.05])
    gp = softmax_seed_gradient(y, one_hot(0, 5))
    uni = softmax_seed_gradient(y, np.full(5, 0.2))
    np.testing.assert_allclose(gp, [0.16, -0.04, -0.04, -0.04, -0.04], atol=1e-15)
    np.testing.assert_allclose(uni, [-0.12, 0.03, 0.03, 0.03, 0.03], atol=1e-15)
    np.testing.assert_allclose(uni, -0.75 * gp, atol=1e-15)


def test_seed_bimodal_dominant_directions():
    y = np.array([0.45, 0.40, 0.05, 0.05, 0.05])
    gp = softmax_seed_gradient(y, one_hot(0, 5))
    uni = softmax_seed_gradient(y, np.full(5, 0.2))
    # hand evaluation: gp = 0.45 (e_0 - y), uniform = 0.2 (0.2 - y)
    np.testing.assert_allclose(gp, [0.2475, -0.18, -0.0225, -0.0225, -0.0225], atol=1e-15)
    np.testing.assert_allclose(uni, [-0.05, -0.04, 0.03, 0.03, 0.03], atol=1e-15)
    # GP: the top class is the only positive direction
    assert gp[0] > 0 and np.all(gp[1:] < 0)
    # uniform: both dominant classes are pushed down, top one opposite to GP
    assert np.sign(uni[0]) == -np.sign(gp[0]) and uni[0] < 0 and uni[1] < 0


@settings(max_examples=200)
@given(probs_strategy(6), probs_strategy(6))
def test_seed_components_sum_to_zero(y, l):
    assert abs(softmax_seed_gradient(y, l).sum()) <= 1e-12


@settings(max_examples=200)
@given(probs_strategy(5), st.integers(0, 4))
def test_seed_onehot_reduction_and_direction(y, k):
    l = one_hot(k, 5)
    seed = softmax_seed_gradient(y, l)
    np.testing.assert_allclose(seed, y[k] * (l - y), rtol=0, atol=1e-12)
    if y[k] < 1:
        assert seed[k] > 0 and np.all(np.delete(seed, k) <= 0)


def test_perturb_properties(rng):
    x = rng.normal(size=(3, 4, 4))
    g = rng.normal(size=x.shape)
    g[0, 0, 0] = 0.0
    np.testing.assert_array_equal(perturb(x, g, 0.0), x)
    out = perturb(x, g, 0.3)
    assert np.all((out == x) | (out == x + 0.3) | (out == x - 0.3))
    assert out[0, 0, 0] == x[0, 0, 0]
    np.testing.assert_allclose(perturb(x, g, 0.3) + perturb(x, g, -0.3), 2 * x, atol=1e-15)
    x0 = x.copy()
    perturb(x, g, 1.0)
    np.testing.assert_array_equal(x, x0)
    with pytest.raises(ValueError):
        perturb(x, g[:1], 0.1)


def test_perturb_config_validation():
    with pytest.raises(ValueError):
        PerturbConfig(variant="nope")
    with pytest.raises(ValueError):
        PerturbConfig(iterations=0)


def test_refine_eps_zero_is_fixed_point(rng):
    net = micro_dense_net(1)
    x = rng.normal(size=(3,) + net.input_shape)
    for variant in ("gp_onehot", "uniform_label", "random_onehot", "top2_label"):
        rep = refine(net, x, PerturbConfig(epsilon=0.0, variant=variant, iterations=3))
        assert len(rep.per_iteration) == 3
        for p in rep.per_iteration:
            np.testing.assert_array_equal(p, rep.prediction_before)
        assert not np.any(rep.perturbation)


def test_refine_single_iteration_matches_manual_pipeline(rng):
    net = micro_dense_net(2)
    x = rng.normal(size=net.input_shape)
    eps = 0.2
    scores, trace = forward(net, x)
    y = softmax(scores)
    seed = softmax_seed_gradient(y, one_hot(np.argmax(y, axis=0), net.num_classes))
    g = backward_from_seed(net, trace, seed).input_grad
    expect = np.argmax(forward(net, x + eps * np.sign(g))[0], axis=0)
    rep = refine(net, x, PerturbConfig(epsilon=eps))
    np.testing.assert_array_equal(rep.prediction_after, expect)
    np.testing.assert_allclose(rep.perturbation, eps * np.sign(g), rtol=0, atol=1e-14)
    assert set(rep.timings) == {"forward", "backward", "reforward"}


def test_refine_iterations_accumulate(rng):
    net = micro_dense_net(3)
    x = rng.normal(size=net.input_shape)
    rep2 = refine(net, x, PerturbConfig(epsilon=0.1, iterations=2))
    first = refine(net, x, PerturbConfig(epsilon=0.1))
    second = refine(net, x + first.perturbation, PerturbConfig(epsilon=0.1))
    np.testing.assert_array_equal(rep2.per_iteration[0], first.prediction_after)
    np.testing.assert_array_equal(rep2.prediction_after, second.prediction_after)
    np.testing.assert_allclose(rep2.perturbation, first.perturbation + second.perturbation, atol=1e-15)


def test_refine_truncated_matches_manual(rng):
    net = micro_dense_net(4)
    x = rng.normal(size=(2,) + net.input_shape)
    scores, trace = forward(net, x)
    y = softmax(scores, axis=1)
    seed = softmax_seed_gradient(y, one_hot(np.argmax(y, axis=1), net.num_classes, axis=1), axis=1)
    g = backward_from_seed(net, trace, seed, "p1").input_grad
    a = x
    for layer in net.layers:
        a, _ = layer.forward(a)
        if layer.name == "p1":
            a = a + 0.5 * np.sign(g)
    rep = refine(net, x, PerturbConfig(epsilon=0.5, truncate_at="p1"))
    np.testing.assert_array_equal(rep.prediction_after, np.argmax(a, axis=1))
    assert rep.perturbation.shape == trace.outputs["p1"].shape


def test_refine_requires_ground_truth_iff_oracle(rng):
    net = micro_dense_net(0)
    x = rng.normal(size=net.input_shape)
    with pytest.raises(ValueError):
        refine(net, x, PerturbConfig(variant="ground_truth_oracle"))
    with pytest.raises(ValueError):
        refine(net, x, PerturbConfig(), ground_truth=np.zeros(net.input_shape[1:], int))
    gt = np.zeros(net.input_shape[1:], int)
    rep = refine(net, x, PerturbConfig(epsilon=0.1, variant="ground_truth_oracle"), ground_truth=gt)
    assert rep.prediction_after.shape == gt.shape


def test_refine_classifier(rng):
    net = micro_classifier(1)
    x = rng.normal(size=(5,) + net.input_shape)
    rep = refine(net, x, PerturbConfig(epsilon=0.0))
    np.testing.assert_array_equal(rep.prediction_after, rep.prediction_before)
    assert rep.prediction_before.shape == (5,)


def test_all_variants_run(rng):
    net = micro_dense_net(5)
    x = rng.normal(size=net.input_shape)
    gt = rng.integers(0, net.num_classes, size=net.input_shape[1:])
    for v in VARIANTS:
        rep = refine(net, x, PerturbConfig(epsilon=0.05, variant=v),
                     ground_truth=gt if v == "ground_truth_oracle" else None)
        assert rep.prediction_after.shape == gt.shape


def test_flip_analysis_examples(rng):
    gt = rng.integers(0, 3, size=(6, 6))
    before = rng.integers(0, 3, size=(6, 6))
    cor, corr = flip_analysis(before, before, gt)
    assert not cor.any() and not corr.any()
    cor, corr = flip_analysis(before, gt, gt)
    np.testing.assert_array_equal(cor, before != gt)
    assert not corr.any()
    with pytest.raises(ValueError):
        flip_analysis(before, gt[:2], gt)


def test_flip_analysis_brute_force(rng):
    for _ in range(20):
        gt, before, after = rng.integers(0, 3, size=(3, 5, 7))
        cor, corr = flip_analysis(before, after, gt)
        for i in range(5):
            for j in range(7):
                assert cor[i, j] == (before[i, j] != gt[i, j] and after[i, j] == gt[i, j])
                assert corr[i, j] == (before[i, j] == gt[i, j] and after[i, j] != gt[i, j])
        assert not np.any(cor & corr)


@pytest.mark.parametrize("layer", ["INPUT", "r1", "p1", "r2", "up"])
def test_direction_reforward_matches_refine(layer, rng):
    net = micro_dense_net(6)
    x = rng.normal(size=(3,) + net.input_shape)
    before, origin, step = direction(net, x, PerturbConfig(truncate_at=layer))
    for eps in (-0.3, 0.0, 0.1, 0.4):
        rep = refine(net, x, PerturbConfig(epsilon=eps, truncate_at=layer))
        np.testing.assert_array_equal(before, rep.prediction_before)
        np.testing.assert_array_equal(np.argmax(reforward(net, origin + eps * step, layer), axis=1),
                                      rep.prediction_after)


def test_truncate_at_scores_iterates(rng):
    net = micro_dense_net(7)
    x = rng.normal(size=net.input_shape)
    rep = refine(net, x, PerturbConfig(epsilon=0.5, truncate_at="up", iterations=3))
    assert len(rep.per_iteration) == 3
    # perturbing scores along the prediction's own direction never changes the argmax
    np.testing.assert_array_equal(rep.prediction_after, rep.prediction_before)
