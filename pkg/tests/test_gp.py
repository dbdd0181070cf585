import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from railcap import gp


def oracle_kernel(a, b, s2, ell):
    r = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2 / ell**2).sum(-1))
    return s2 * (1 + math.sqrt(5) * r + 5 / 3 * r**2) * np.exp(-math.sqrt(5) * r)


def oracle_posterior(x, y, xs, s2, ell, noise, mean):
    k = oracle_kernel(x, x, s2, ell) + noise * np.eye(len(x))
    ks = oracle_kernel(x, xs, s2, ell)
    kinv = np.linalg.inv(k)
    mu = mean(xs) + ks.T @ kinv @ (y - mean(x))
    var = s2 - np.einsum("ij,ik,kj->j", ks, kinv, ks)
    return mu, var


def make(x, y, noise=1e-2, s2=1.3, ell=(0.4, 0.7), mean=None):
    mean = mean or gp.MeanParams("constant", constant=0.2)
    return gp.GpModel(x, y, noise, gp.KernelParams(s2, np.array(ell)), mean)


def test_kernel_values():
    p = gp.KernelParams(1.0, np.array([1.0]))
    assert gp.kernel_eval([0.0], [1.0], p) == pytest.approx(0.52399, abs=1e-5)
    assert gp.kernel_eval([0.3], [0.3], gp.KernelParams(2.5, np.array([1.0]))) == 2.5


def test_mean_values():
    m = gp.MeanParams("exponential", beta_raw=0.0, w_raw=np.log([2.0]), gamma=0.0)
    assert gp.mean_eval([0.5], m) == pytest.approx(math.e)
    m = gp.MeanParams("exponential", beta_raw=math.log(3.0), w_raw=np.log([2.0]), gamma=1.0)
    assert gp.mean_eval([0.0], m) == pytest.approx(2.0)
    assert gp.mean_eval([7.0], gp.MeanParams("constant", constant=-1.5)) == -1.5


def test_prior_when_empty():
    m = make(np.zeros((0, 2)), np.zeros(0))
    post = m.posterior(np.array([[0.1, 0.2]]))
    assert post.mean[0] == 0.2 and post.variance[0] == 1.3


def test_interpolation():
    x = np.array([[0.3, 0.6]])
    m = make(x, [1.7], noise=1e-10)
    post = m.posterior(x)
    assert post.mean[0] == pytest.approx(1.7, abs=1e-6)
    assert post.variance[0] < 1e-6


@pytest.mark.parametrize("variant", ["constant", "exponential"])
def test_posterior_matches_dense_oracle(variant):
    rng = np.random.default_rng(3)
    x = rng.uniform(size=(15, 2))
    y = np.sin(4 * x[:, 0]) + x[:, 1]
    xs = rng.uniform(size=(7, 2))
    if variant == "constant":
        mean = gp.MeanParams("constant", constant=0.2)
    else:
        mean = gp.MeanParams("exponential", beta_raw=-0.5, w_raw=np.log([0.8, 1.5]), gamma=0.3)
    m = make(x, y, mean=mean)
    mu, var = oracle_posterior(x, y, xs, 1.3, np.array([0.4, 0.7]), 1e-2, lambda z: gp.mean_eval(z, mean))
    post = m.posterior(xs)
    assert np.abs(post.mean - mu).max() < 1e-10
    assert np.abs(post.variance - var).max() < 1e-10


def test_mll_scalar_density():
    m = gp.GpModel(np.array([[0.5]]), [0.3], 0.25, gp.KernelParams(0.75, np.array([1.0])),
                   gp.MeanParams("constant", constant=0.3))
    assert gp.log_marginal_likelihood(m) == pytest.approx(-0.5 * math.log(2 * math.pi))


def fd_grad(m, h=1e-6):
    theta = gp.pack(m)
    g = np.empty_like(theta)
    for i in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (gp.log_marginal_likelihood(gp.unpack(tp, m)) - gp.log_marginal_likelihood(gp.unpack(tm, m))) / (2 * h)
    return g


@pytest.mark.parametrize("variant", ["constant", "exponential"])
@pytest.mark.parametrize("seed", range(3))
def test_mll_gradient(variant, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(5, 3))
    y = np.exp(x.sum(1)) - 2 + 0.1 * rng.normal(size=5)
    m = gp.default_model(x, y, variant)
    _, g = gp.log_marginal_likelihood(m, with_grad=True)
    g_fd = fd_grad(m)
    assert np.linalg.norm(g - g_fd) / max(np.linalg.norm(g_fd), 1e-8) < 1e-4


def test_predict_with_grad_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(12, 2))
    mean = gp.MeanParams("exponential", beta_raw=0.0, w_raw=np.log([0.5, 1.0]), gamma=1.0)
    m = make(x, x.sum(1), mean=mean)
    x0 = np.array([0.37, 0.61])
    mu, dm, s, ds = m.predict_with_grad(x0)
    h = 1e-6
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        mp, _, sp_, _ = m.predict_with_grad(x0 + e)
        mm, _, sm, _ = m.predict_with_grad(x0 - e)
        assert dm[i] == pytest.approx((mp - mm) / (2 * h), rel=1e-5, abs=1e-7)
        assert ds[i] == pytest.approx((sp_ - sm) / (2 * h), rel=1e-5, abs=1e-7)


def test_fit_recovers_hyperparameters():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(40, 1))
    truth = gp.KernelParams(2.0, np.array([0.3]))
    k = gp.matern52(x, x, truth) + 1e-4 * np.eye(40)
    y = np.linalg.cholesky(k) @ rng.normal(size=40)
    fit = gp.fit_hyperparameters(gp.default_model(x, y, "constant"), restarts=5, seed=0)
    assert 2.0 / 3 < fit.kernel.outputscale < 6.0
    assert 0.1 < fit.kernel.lengthscales[0] < 0.9


def test_fit_exponential_mean_trend():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(30, 2))
    y = 0.5 * np.exp(1.5 * x[:, 0] + 0.8 * x[:, 1]) - 0.4
    fit = gp.fit_hyperparameters(gp.default_model(x, y, "exponential"), restarts=3, seed=0)
    resid = y - gp.mean_eval(x, fit.mean)
    assert np.sqrt(np.mean(resid**2)) < 0.1 * np.ptp(y)


def test_fit_deterministic():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(10, 2))
    y = x[:, 0] ** 2
    a = gp.fit_hyperparameters(gp.default_model(x, y, "exponential"), restarts=1, seed=4)
    b = gp.fit_hyperparameters(gp.default_model(x, y, "exponential"), restarts=1, seed=4)
    assert np.array_equal(gp.pack(a), gp.pack(b))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 12))
def test_posterior_variance_bounded(seed, n):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(n, 2))
    m = make(x, rng.normal(size=n))
    post = m.posterior(rng.uniform(size=(20, 2)))
    assert np.all(post.variance >= 0)
    assert np.all(post.variance <= 1.3 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_duplicate_inputs_do_not_break_factorization(seed):
    rng = np.random.default_rng(seed)
    x = np.repeat(rng.uniform(size=(3, 2)), 3, axis=0)
    m = make(x, rng.normal(size=9), noise=1e-8)
    post = m.posterior(x)
    assert np.all(np.isfinite(post.mean))
