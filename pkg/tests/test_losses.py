import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from livt.errors import ConfigError, PriorError, ShapeError, TargetError
from livt.losses import (
    LOSS_KINDS,
    LogitBias,
    LossConfig,
    bce_loss_and_grad,
    bias_bce,
    bias_bce_with_test_prior,
    bias_ce,
    ce_loss_and_grad,
    make_loss,
    ntbce_loss_and_grad,
    predict_proba,
)
from livt.oracle import finite_diff_grad, relative_error
from livt.priors import ClassPrior, uniform_prior

counts_st = st.lists(st.integers(1, 10_000), min_size=2, max_size=12)


def test_bias_ce_examples():
    np.testing.assert_allclose(bias_ce(uniform_prior(10)).values, -math.log(10), rtol=1e-15)
    np.testing.assert_allclose(bias_ce(ClassPrior(np.array([9, 1]))).values, [-0.105361, -2.302585], atol=1e-6)


def test_bias_bce_examples():
    b = bias_bce(ClassPrior(np.array([9, 1]))).values
    np.testing.assert_allclose(b, [2.197225, -2.197225], atol=1e-6)
    for C in (2, 10, 100, 1000):
        assert np.all(bias_bce(uniform_prior(C)).values == 0.0)


def test_bias_bce_approaches_ce_plus_log_c_minus_1_for_rare_class():
    p = ClassPrior(np.array([1, 999_999]))
    gap = bias_bce(p).values[0] - bias_ce(p).values[0] - math.log(p.C - 1)
    assert abs(gap) < 2e-6


def test_bias_bce_rejects_single_class_and_certain_class():
    with pytest.raises(PriorError):
        bias_bce(ClassPrior(np.array([5])))


def test_bias_test_prior_reductions():
    ps = ClassPrior(np.array([9, 1]))
    np.testing.assert_allclose(bias_bce_with_test_prior(ps, uniform_prior(2)).values, [2.197225, -2.197225], atol=1e-6)
    assert np.all(bias_bce_with_test_prior(ps, ps).values == 0.0)
    with pytest.raises(ShapeError):
        bias_bce_with_test_prior(ps, uniform_prior(3))


@settings(max_examples=200, deadline=None)
@given(counts_st)
def test_bias_algebra_properties(counts):
    p = ClassPrior(np.array(counts))
    uni = ClassPrior(np.full(p.C, 7), role="test")
    bce, ce = bias_bce(p).values, bias_ce(p).values
    assert bce.size == p.C
    assert np.array_equal(bias_bce_with_test_prior(p, uni).values, bce)
    assert np.all(bias_bce_with_test_prior(p, p).values == 0.0)
    # sign of the BCE bias follows pi - 1/C
    sign = np.sign(p.counts * p.C - p.N)
    assert np.array_equal(np.sign(bce), sign)
    # the BCE margin between two classes is strictly wider than the CE one
    for a in range(p.C):
        for b in range(p.C):
            if p.counts[a] > p.counts[b]:
                assert bce[a] - bce[b] > ce[a] - ce[b]


def test_logit_bias_validation():
    with pytest.raises(ConfigError):
        LogitBias(np.zeros(3), "focal")
    b = LogitBias(np.array([1.0, -2.0]), "bce", tau=0.5)
    np.testing.assert_array_equal(b.scaled(), [0.5, -1.0])
    assert b.with_tau(2).tau == 2.0 and b.C == 2


def test_ce_examples():
    out = ce_loss_and_grad(np.zeros((1, 2)), np.array([[1.0, 0.0]]))
    assert out.value == pytest.approx(math.log(2), abs=1e-12)
    np.testing.assert_allclose(out.grad, [[-0.5, 0.5]], atol=1e-15)
    assert ce_loss_and_grad(np.zeros((1, 2)), np.array([0])).value == out.value


def test_ce_uniform_bias_is_exact_noop(rng):
    z = rng.normal(size=(5, 7))
    t = rng.dirichlet(np.ones(7), size=5)
    plain = ce_loss_and_grad(z, t)
    biased = ce_loss_and_grad(z, t, bias_ce(uniform_prior(7)).with_tau(1.7))
    assert plain.value == biased.value
    assert np.array_equal(plain.grad, biased.grad)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3), st.integers(0, 2**31))
def test_ce_shift_invariance(c, seed):
    r = np.random.default_rng(seed)
    z = r.normal(size=(3, 4))
    t = r.dirichlet(np.ones(4), size=3)
    b = bias_ce(ClassPrior(r.integers(1, 100, size=4)))
    a, s = ce_loss_and_grad(z, t, b), ce_loss_and_grad(z + c, t, b)
    assert s.value == pytest.approx(a.value, rel=1e-9, abs=1e-9)
    np.testing.assert_allclose(s.grad, a.grad, atol=1e-12)


def test_bce_examples():
    t = np.array([[0.0, 1.0, 0.0]])
    out = bce_loss_and_grad(np.zeros((1, 3)), t)
    assert out.value == pytest.approx(3 * math.log(2), abs=1e-12)
    assert out.grad[0, 1] == -0.5
    np.testing.assert_array_equal(out.grad[0, [0, 2]], [0.5, 0.5])


def test_bce_uniform_bias_equals_plain(rng):
    z = rng.normal(size=(4, 5))
    t = rng.uniform(size=(4, 5))
    plain = bce_loss_and_grad(z, t)
    bal = bce_loss_and_grad(z, t, LossConfig(bias=bias_bce(uniform_prior(5))))
    assert plain.value == bal.value and np.array_equal(plain.grad, bal.grad)


def test_bce_closed_form_grad(rng):
    z = rng.normal(size=(3, 4))
    y = np.array([0, 3, 1])
    t = np.eye(4)[y]
    b = bias_bce(ClassPrior(np.array([50, 20, 5, 1])))
    g = bce_loss_and_grad(z, t, LossConfig(bias=b)).grad * 3
    s = expit(z + b.values)
    np.testing.assert_allclose(g, np.where(t == 1, s - 1, s), atol=1e-15)


def test_bce_weights(rng):
    z = rng.normal(size=(2, 3))
    t = np.eye(3)[[0, 2]]
    w = np.array([2.0, 0.0, 1.0])
    out = bce_loss_and_grad(z, t, LossConfig(weights=w))
    assert np.all(out.grad[:, 1] == 0)
    with pytest.raises(ShapeError):
        bce_loss_and_grad(z, t, LossConfig(weights=np.ones(4)))
    with pytest.raises(ConfigError):
        LossConfig(weights=np.array([-1.0, 1, 1]))


def test_bce_stable_for_huge_logits():
    z = np.array([[1e4, -1e4, 3e4]])
    t = np.array([[1.0, 0.0, 0.0]])
    out = bce_loss_and_grad(z, t)
    assert np.isfinite(out.value) and np.all(np.isfinite(out.grad))
    assert out.value == pytest.approx(3e4)


def test_ntbce_examples():
    out = ntbce_loss_and_grad(np.zeros((1, 2)), np.array([[1.0, 0.0]]), lam=2.0)
    assert out.value == pytest.approx(math.log(2) * 1.5, abs=1e-12)
    assert out.value == pytest.approx(1.039721, abs=1e-6)


def test_ntbce_lambda_one_is_bce(rng):
    z = rng.normal(0, 4, size=(6, 5))
    t = np.eye(5)[rng.integers(0, 5, 6)]
    b = bias_bce(ClassPrior(np.array([100, 40, 9, 3, 1])))
    a = ntbce_loss_and_grad(z, t, 1.0, b)
    c = bce_loss_and_grad(z, t, LossConfig(bias=b))
    assert a.value == c.value and np.array_equal(a.grad, c.grad)


def test_ntbce_damps_negative_gradients(rng):
    z = rng.normal(size=(4, 3))
    t = np.eye(3)[[0, 1, 2, 0]]
    g1 = ntbce_loss_and_grad(z, t, 1.0).grad
    g4 = ntbce_loss_and_grad(z, t, 4.0).grad
    neg = (t == 0) & (z < 0)
    assert np.all(g4[neg] < g1[neg])
    np.testing.assert_array_equal(g4[t == 1], g1[t == 1])


def test_ntbce_rejects_soft_targets_and_small_lambda():
    with pytest.raises(TargetError):
        ntbce_loss_and_grad(np.zeros((1, 2)), np.array([[0.3, 0.7]]))
    with pytest.raises(ConfigError):
        ntbce_loss_and_grad(np.zeros((1, 2)), np.array([0]), lam=0.5)


def test_target_validation():
    with pytest.raises(TargetError):
        ce_loss_and_grad(np.zeros((1, 2)), np.array([[0.5, 0.6]]))
    with pytest.raises(TargetError):
        bce_loss_and_grad(np.zeros((1, 2)), np.array([[1.5, 0.0]]))
    with pytest.raises(TargetError):
        ce_loss_and_grad(np.zeros((1, 2)), np.array([2]))
    with pytest.raises(ShapeError):
        ce_loss_and_grad(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        ce_loss_and_grad(np.zeros((1, 2)), np.array([[1.0, 0.0]]), bias_ce(uniform_prior(3)))


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_finite_for_wide_logits(kind, rng):
    prior = ClassPrior(np.array([500, 50, 5, 1]))
    fn, _ = make_loss(kind, prior, tau=1.3, lam=3.0)
    for _ in range(20):
        z = rng.uniform(-50, 50, size=(8, 4))
        out = fn(z, np.eye(4)[rng.integers(0, 4, 8)])
        assert np.isfinite(out.value) and out.value >= 0 and np.all(np.isfinite(out.grad))


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_finite_difference_agreement(kind, rng):
    prior = ClassPrior(np.array([300, 60, 12, 2]))
    fn, _ = make_loss(kind, prior, tau=1.0, lam=2.5)
    z = rng.normal(0, 2, size=(5, 4))
    t = np.eye(4)[rng.integers(0, 4, 5)]
    fd = finite_diff_grad(lambda x: fn(x, t).value, z)
    assert relative_error(fn(z, t).grad, fd) < 1e-6


def test_make_loss_biases():
    prior = ClassPrior(np.array([30, 3]))
    assert make_loss("ce", prior)[1] is None and make_loss("bce", prior)[1] is None
    _, b = make_loss("bal_bce", prior, tau=0.5)
    assert b.tau == 0.5 and np.array_equal(b.values, bias_bce(prior).values)
    _, b = make_loss("bal_ce", prior)
    assert b.kind == "ce"
    with pytest.raises(ConfigError):
        make_loss("focal", prior)


def test_tau_zero_bal_bce_is_bce(rng):
    prior = ClassPrior(np.array([900, 90, 9]))
    z = rng.normal(size=(4, 3))
    t = rng.uniform(size=(4, 3))
    a = make_loss("bal_bce", prior, tau=0.0)[0](z, t)
    c = make_loss("bce", prior)[0](z, t)
    assert a.value == c.value and np.array_equal(a.grad, c.grad)


def test_predict_proba_rows(rng):
    z = rng.normal(0, 30, size=(10, 5))
    for kind in LOSS_KINDS:
        p = predict_proba(z, kind)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_array_equal(p.argmax(1), z.argmax(1))
    dead = predict_proba(np.array([[-2000.0, -1000.0]]), "bce")
    np.testing.assert_array_equal(dead, [[0.0, 1.0]])
