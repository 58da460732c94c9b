import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcheck as G
from ctriage.net.losses import (cross_entropy_loss, hinge_loss, sigmoid, sigmoid_cross_entropy,
                                softmax_cross_entropy)
from ctriage.taxonomy import MaskedTarget, default_taxonomy, effective_target

TAX = default_taxonomy()


def mt(t, w=None):
    t = np.asarray(t, dtype=float)
    return MaskedTarget(t, np.ones_like(t) if w is None else np.asarray(w, dtype=float))


def test_half_probability_gives_ln2():
    loss, _ = cross_entropy_loss([0.5], mt([1]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = sigmoid_cross_entropy([0.0], mt([1]))
    assert loss == pytest.approx(0.693147, abs=1e-6)


def test_perfect_prediction_is_clamped():
    t = np.array([1, 0, 1, 0], float)
    loss, _ = cross_entropy_loss(t, mt(t))
    assert 0 <= loss <= 1e-6


def scalar_ce(p, t, w):
    num = 0.0
    for pk, tk, wk in zip(p, t, w):
        pk = min(max(pk, 1e-7), 1 - 1e-7)
        num -= wk * (tk * math.log(pk) + (1 - tk) * math.log(1 - pk))
    return num / sum(w)


@pytest.mark.parametrize("seed", range(10))
def test_cross_entropy_matches_scalar_formula(seed):
    rng = np.random.default_rng(seed)
    p = rng.random(TAX.K)
    target = effective_target(rng.integers(0, 2, TAX.K), TAX)
    loss, _ = cross_entropy_loss(p, target)
    assert abs(loss - scalar_ce(p, target.targets, target.weights)) < 1e-10
    z = rng.standard_normal(TAX.K) * 3
    loss_z, _ = sigmoid_cross_entropy(z, target)
    assert abs(loss_z - scalar_ce(sigmoid(z), target.targets, target.weights)) < 1e-10


def test_hinge_examples():
    assert hinge_loss([2.0], mt([1]))[0] == 0.0
    assert hinge_loss([0.0], mt([1]))[0] == 1.0
    assert hinge_loss([-0.5], mt([0]))[0] == pytest.approx(0.5)
    _, g = hinge_loss([1.0], mt([1]))
    assert g[0] == 0.0


def test_batch_loss_is_mean_of_rows():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((5, TAX.K))
    target = effective_target(rng.integers(0, 2, (5, TAX.K)), TAX)
    batch, _ = sigmoid_cross_entropy(z, target)
    rows = [sigmoid_cross_entropy(z[i], MaskedTarget(target.targets[i], target.weights[i]))[0]
            for i in range(5)]
    assert batch == pytest.approx(np.mean(rows), abs=1e-12)


@pytest.mark.parametrize("fn", [cross_entropy_loss, hinge_loss, sigmoid_cross_entropy])
def test_all_weights_zero_is_an_error(fn):
    with pytest.raises(ValueError):
        fn([0.3, 0.3], mt([1, 0], [0, 0]))


def test_shape_mismatch():
    with pytest.raises(ValueError):
        sigmoid_cross_entropy([0.1, 0.2], mt([1]))


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients(seed):
    assert max(G.check_losses(seed).values()) < G.TOL


labels = st.lists(st.integers(0, 1), min_size=TAX.K, max_size=TAX.K).map(np.array)


@settings(max_examples=200, deadline=None)
@given(labels, st.integers(0, 2 ** 32 - 1))
def test_masked_entries_do_not_matter(y, seed):
    target = effective_target(y, TAX)
    masked = target.weights == 0
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(TAX.K)
    flipped = MaskedTarget(np.where(masked, 1 - target.targets, target.targets), target.weights)
    for fn in (sigmoid_cross_entropy, hinge_loss):
        a, ga = fn(z, target)
        b, gb = fn(z, flipped)
        assert a == b and np.array_equal(ga, gb)
        assert np.all(ga[masked] == 0)


def test_softmax_single_label_mode():
    loss, g = softmax_cross_entropy([0.0, 0.0], 0)
    assert loss == pytest.approx(math.log(2))
    assert g.tolist() == pytest.approx([-0.5, 0.5])
    with pytest.raises(ValueError):
        softmax_cross_entropy([0.0, 0.0], 2)


def test_sigmoid_is_stable():
    s = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(s)) and s[1] == 0.5
