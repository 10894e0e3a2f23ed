import json

import numpy as np
import pytest
from scipy.optimize import minimize

from kexp.baselines import (HmcConfig, ScoreMatchingModel, fit_score_matching, hmc_sample,
                            leapfrog, select_score_matching)
from kexp.errors import ContractError, NumericError, ResourceError
from kexp.kernel import KernelSpec
from kexp.trainer import ReferenceMeasure

BASE2 = ReferenceMeasure(np.zeros(2), np.full(2, 4.0))


def small_fit(n=8, seed=0, eta=0.3, lam=1.0):
    X = np.random.default_rng(seed).normal(size=(n, 2))
    return fit_score_matching(X, KernelSpec(1.5, 2), eta, BASE2, lam=lam)


def fd_grad_and_lap(fun, X, h=1e-4):
    n, d = X.shape
    g = np.zeros((n, d))
    lap = np.zeros((n, d))
    f0 = fun(X)
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        up, down = fun(X + e), fun(X - e)
        g[:, j] = (up - down) / (2 * h)
        lap[:, j] = (up - 2 * f0 + down) / h**2
    return g, lap


class TestScoreMatching:
    def test_gradient_matches_fd(self):
        m = small_fit()
        X = np.random.default_rng(1).normal(size=(5, 2))
        g, _ = fd_grad_and_lap(m.evaluate, X)
        np.testing.assert_allclose(m.gradient(X), g, atol=1e-6)

    def test_objective_against_fd_oracle(self):
        # fit term from finite differences of f, RKHS norm from the model
        m = small_fit(lam=0.7)
        rng = np.random.default_rng(2)
        a, beta = -1.3, rng.normal(size=m.beta.size)
        g, lap = fd_grad_and_lap(lambda Z: m.evaluate(Z, a, beta), m.data)
        lam, n = m.lam, m.data.shape[0]
        fit = np.sum(0.5 * lam**2 * g**2 + lam * (g * BASE2.grad_log_density(m.data) + lap)) / n
        expected = fit + 0.5 * m.eta * m.norm_sq(a, beta)
        assert m.objective(a, beta) == pytest.approx(expected, rel=1e-5)

    def test_closed_form_is_minimizer(self):
        m = small_fit(eta=0.5, lam=0.8)
        best = m.objective()

        def obj(theta):
            return m.objective(theta[0], theta[1:])

        res = minimize(obj, np.zeros(1 + m.beta.size), method="BFGS",
                       options={"gtol": 1e-10, "maxiter": 5000})
        assert best <= res.fun + 1e-7
        assert res.fun == pytest.approx(best, abs=1e-5)

    def test_perturbations_increase_objective(self):
        m = small_fit()
        best = m.objective()
        rng = np.random.default_rng(3)
        for _ in range(5):
            v = rng.normal(size=m.beta.size) * 1e-2
            assert m.objective(m.delta_coef, m.beta + v) > best
        assert m.objective(m.delta_coef * 1.01, m.beta) > best

    def test_recovers_gaussian_shape(self):
        X = np.random.default_rng(4).normal(size=(150, 2))
        m = fit_score_matching(X, KernelSpec(4.0, 2), 0.05, BASE2)
        T = np.random.default_rng(9).normal(size=(200, 2)) * 0.8
        score = np.array([m.log_density_and_grad(t)[1] for t in T])
        # the true score is -x; the base alone gives -x/4
        fitted_err = np.mean((score + T) ** 2)
        base_err = np.mean((-T / 4 + T) ** 2)
        assert fitted_err < 0.4 * base_err

    def test_resource_guard(self):
        X = np.zeros((50, 2))
        with pytest.raises(ResourceError):
            fit_score_matching(X, KernelSpec(1.0, 2), 0.1, BASE2, max_features=99)

    def test_dimension_contract(self):
        with pytest.raises(ContractError):
            fit_score_matching(np.zeros((5, 3)), KernelSpec(1.0, 2), 0.1, BASE2)

    def test_gram_bytes(self):
        m = small_fit(n=10)
        assert m.gram_nbytes == (10 * 2) ** 2 * 8

    def test_roundtrip(self, tmp_path):
        m = small_fit()
        m.save(tmp_path / "sm.json")
        back = ScoreMatchingModel.load(tmp_path / "sm.json")
        X = np.random.default_rng(5).normal(size=(4, 2))
        np.testing.assert_array_equal(back.evaluate(X), m.evaluate(X))
        assert json.loads((tmp_path / "sm.json").read_text())["format"].startswith("kexp-score")


class TestSelection:
    def test_heldout_loss_matches_fd(self):
        m = small_fit(lam=2.0)
        Y = np.random.default_rng(3).normal(size=(6, 2))
        g, lap = fd_grad_and_lap(m.evaluate, Y)
        bg = BASE2.grad_log_density(Y)
        expect = np.mean(np.sum(0.5 * 4.0 * g**2 + 2.0 * (g * bg + lap), axis=1))
        np.testing.assert_allclose(m.heldout_loss(Y, bg), expect, rtol=1e-5)

    def test_training_loss_is_objective_minus_penalty(self):
        m = small_fit()
        fit = m.heldout_loss(m.data, m.base_grad)
        np.testing.assert_allclose(fit + 0.5 * m.eta * m.norm_sq(), m.objective(), rtol=1e-10)

    def test_picks_minimum_and_refits(self):
        X = np.random.default_rng(1).normal(size=(40, 2))
        m, rows = select_score_matching(X, BASE2, [0.5, 2.0], [0.01, 1.0], seed=0)
        assert len(rows) == 4
        bw, eta, _ = min(rows, key=lambda r: r[2])
        assert (m.kernel.bandwidth_sq, m.eta) == (bw, eta)
        assert m.data.shape == X.shape

    def test_holdout_contract(self):
        with pytest.raises(ContractError):
            select_score_matching(np.zeros((5, 2)), BASE2, [1.0], [0.1], holdout=1.0)


def gaussian_target(q):
    return -0.5 * float(q @ q), -q


class TestLeapfrog:
    def test_reversible(self):
        q0, p0 = np.array([0.3, -1.0]), np.array([1.0, 0.5])
        q1, p1, _, _ = leapfrog(gaussian_target, q0, p0, 0.1, 20)
        q2, p2, _, _ = leapfrog(gaussian_target, q1, -p1, 0.1, 20)
        np.testing.assert_allclose(q2, q0, atol=1e-12)
        np.testing.assert_allclose(-p2, p0, atol=1e-12)

    def test_energy_error_second_order(self):
        q0, p0 = np.array([1.0, 0.0]), np.array([0.0, 1.0])

        def err(step):
            n = int(round(1.0 / step))
            q, p, lp, _ = leapfrog(gaussian_target, q0, p0, step, n)
            return abs((-lp + 0.5 * p @ p) - (0.5 * q0 @ q0 + 0.5 * p0 @ p0))

        # at least second order; the endpoint error of a harmonic orbit oscillates
        assert err(0.05) < err(0.1) / 3.5
        assert err(0.025) < err(0.05) / 3.5


class TestHmc:
    def test_gaussian_moments(self):
        res = hmc_sample(gaussian_target, HmcConfig(chain_length=4000, burn_in=500, seed=1),
                         np.zeros(2))
        assert res.draws.shape == (3500, 2)
        np.testing.assert_allclose(res.draws.mean(axis=0), 0, atol=0.1)
        np.testing.assert_allclose(res.draws.var(axis=0), 1, atol=0.15)
        assert 0.5 < res.acceptance_rate <= 1.0

    def test_deterministic(self):
        cfg = HmcConfig(chain_length=300, burn_in=100, seed=4)
        a = hmc_sample(gaussian_target, cfg, np.ones(2))
        b = hmc_sample(gaussian_target, cfg, np.ones(2))
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_bad_start(self):
        with pytest.raises(NumericError):
            hmc_sample(lambda q: (-np.inf, q), HmcConfig(chain_length=10, burn_in=0), np.zeros(1))

    def test_config_contract(self):
        with pytest.raises(ContractError):
            HmcConfig(chain_length=10, burn_in=10)

    def test_samples_fitted_model(self):
        X = np.random.default_rng(6).normal(size=(60, 2))
        m = fit_score_matching(X, KernelSpec(2.0, 2), 0.1, BASE2)
        res = hmc_sample(m.log_density_and_grad, HmcConfig(chain_length=400, burn_in=100),
                         X.mean(axis=0))
        assert np.all(np.isfinite(res.draws))
        assert np.linalg.norm(res.draws.mean(axis=0)) < 1.0
