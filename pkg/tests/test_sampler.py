import json

import numpy as np
import pytest

from kexp.errors import ContractError
from kexp.kernel import KernelSpec
from kexp.rkhs import zero_function
from kexp.sampler import (Layer, ParamGradient, TransportSampler, apply_update, dual_gradient,
                          sample)


def small_sampler(seed=0, cond_dim=0):
    return TransportSampler.init(noise_dim=3, output_dim=2, hidden=5, depth=3,
                                 cond_dim=cond_dim, seed=seed)


def objective(sampler, f, nu, lam, xi):
    out = sampler.forward(xi)
    return float(np.mean(-f(out) + nu(out) / lam))


def fn(seed, spec=KernelSpec(1.0, 2)):
    rng = np.random.default_rng(seed)
    f = zero_function(spec)
    f.append(rng.normal(size=(6, 2)), rng.normal(size=6))
    return f


class TestForward:
    def test_shapes(self):
        s = small_sampler()
        assert s.sample(7).shape == (7, 2)
        assert [L.W.shape for L in s.layers] == [(3, 5), (5, 5), (5, 2)]
        assert [L.activation for L in s.layers] == ["tanh", "tanh", "linear"]

    def test_module_sample_matches_method(self):
        a, b = small_sampler(4), small_sampler(4)
        np.testing.assert_array_equal(sample(a, 10), b.sample(10))

    def test_seeded(self):
        np.testing.assert_array_equal(small_sampler(1).sample(5), small_sampler(1).sample(5))
        assert not np.array_equal(small_sampler(1).sample(5), small_sampler(2).sample(5))

    def test_single_linear_layer_is_affine(self):
        W, b = np.array([[2.0, 0.0], [0.0, 3.0]]), np.array([1.0, -1.0])
        s = TransportSampler([Layer(W, b, "linear")], 2, 2)
        np.testing.assert_allclose(s.forward([[1.0, 1.0]]), [[3.0, 2.0]])

    def test_conditional_inputs(self):
        s = small_sampler(cond_dim=1)
        assert s.layers[0].W.shape == (4, 5)
        assert s.sample(4, cond=np.zeros((4, 1))).shape == (4, 2)
        with pytest.raises(ContractError):
            s.sample(4)

    def test_bad_shapes(self):
        with pytest.raises(ContractError):
            TransportSampler([Layer(np.zeros((2, 3)), np.zeros(3))], 2, 2)
        with pytest.raises(ContractError):
            small_sampler().forward(np.zeros((2, 4)))
        with pytest.raises(ContractError):
            small_sampler().sample(0)

    def test_roundtrip(self):
        s = small_sampler(3)
        s.sample(2)
        t = TransportSampler.from_dict(json.loads(json.dumps(s.to_dict())))
        np.testing.assert_array_equal(s.sample(6), t.sample(6))

    def test_copy_shares_noise_position_not_storage(self):
        s = small_sampler(3)
        t = s.copy()
        np.testing.assert_array_equal(s.sample(3), t.sample(3))
        t.layers[0].W[:] = 0
        assert np.any(s.layers[0].W != 0)


class TestBackward:
    def test_matches_finite_differences(self):
        s = small_sampler(0)
        f, nu, lam = fn(1), fn(2), 3.0
        xi = s.draw_noise(8)
        g = dual_gradient(s, f, nu, lam, 8, xi=xi)
        h = 1e-6
        worst = 0.0
        for li, L in enumerate(s.layers):
            for arr, grad in ((L.W, g.grads[li][0]), (L.b, g.grads[li][1])):
                for idx in np.ndindex(arr.shape):
                    old = arr[idx]
                    arr[idx] = old + h
                    up = objective(s, f, nu, lam, xi)
                    arr[idx] = old - h
                    down = objective(s, f, nu, lam, xi)
                    arr[idx] = old
                    worst = max(worst, abs((up - down) / (2 * h) - grad[idx]))
        assert worst < 1e-6

    def test_zero_functions_give_zero_gradient(self):
        s = small_sampler()
        z = zero_function(KernelSpec(1.0, 2))
        assert dual_gradient(s, z, z, 1.0, 4).norm() == 0.0


class TestApplyUpdate:
    def grad(self, s, value):
        return ParamGradient([(np.full_like(L.W, value), np.full_like(L.b, value))
                              for L in s.layers])

    def test_plain_step(self):
        s = small_sampler()
        W0 = s.layers[0].W.copy()
        apply_update(s, self.grad(s, 1.0), 0.1)
        np.testing.assert_allclose(s.layers[0].W, W0 - 0.1)

    def test_clipping(self):
        s = small_sampler()
        before = ParamGradient([(L.W.copy(), L.b.copy()) for L in s.layers])
        g = self.grad(s, 10.0)
        apply_update(s, g, 1.0, clip_norm=5.0)
        after = ParamGradient([(L.W, L.b) for L in s.layers])
        moved = (before + after.scaled(-1.0)).norm()
        assert moved == pytest.approx(5.0)

    def test_clip_inactive_below_norm(self):
        s, t = small_sampler(), small_sampler()
        g = self.grad(s, 1e-3)
        apply_update(s, g, 1.0, clip_norm=5.0)
        apply_update(t, g, 1.0)
        np.testing.assert_array_equal(s.layers[1].W, t.layers[1].W)

    def test_descent_lowers_objective(self):
        s = small_sampler(0)
        f, nu = fn(1), fn(2)
        xi = s.draw_noise(32)
        before = objective(s, f, nu, 2.0, xi)
        apply_update(s, dual_gradient(s, f, nu, 2.0, 32, xi=xi), 1e-2)
        assert objective(s, f, nu, 2.0, xi) < before

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            apply_update(small_sampler(), ParamGradient([(np.zeros((1, 1)), np.zeros(1))]), 0.1)


class TestParamGradient:
    def test_algebra(self):
        g = ParamGradient([(np.ones((2, 2)), np.ones(2))])
        assert g.norm() == pytest.approx(np.sqrt(6))
        assert (g + g).norm() == pytest.approx(2 * np.sqrt(6))
        np.testing.assert_array_equal(g.scaled(0.5).flat(), np.full(6, 0.5))
        assert ParamGradient.zeros_like(small_sampler()).norm() == 0.0
