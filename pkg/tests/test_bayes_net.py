import math

import numpy as np
import pytest

from advbnn import nd_core as nd
from advbnn.bayes_net import (Linear, Network, Prior, VariationalLinear, VariationalParams,
                              init_variational, mlp, rand_layer_backward, sample_weights,
                              variational_conv2d_forward, variational_linear_forward)
from advbnn.nd_core import GradTape, Tensor
from advbnn.objectives import kl_gaussian


def vp(mu, s):
    return VariationalParams(Tensor(np.asarray(mu, dtype=np.float64), requires_grad=True),
                             Tensor(np.asarray(s, dtype=np.float64), requires_grad=True))


def naive_conv(x, w, stride, padding):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                out[b, o, i, j] += xp[b, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
    return out


class TestInit:
    def test_unit_prior_gives_zero_log_std(self):
        p = init_variational((3, 4), 1.0, 4)
        assert np.all(p.s.data == 0)

    def test_log_std_matches_prior_scale(self):
        p = init_variational((3, 4), 0.05, 4, dtype=np.float64)
        np.testing.assert_allclose(p.s.data, -2.995732273553991, rtol=1e-12)

    def test_mean_range(self):
        p = init_variational((50, 16), 0.05, 16)
        assert np.all(np.abs(p.mu.data) <= 0.25)

    def test_zero_mean_init_has_zero_kl(self):
        p = init_variational((3, 4), 0.05, 4, dtype=np.float64)
        kl = kl_gaussian(np.zeros((3, 4)), np.exp(p.s.data), 0.0, 0.05)
        np.testing.assert_allclose(kl, 0.0, atol=1e-12)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            init_variational((2,), 0.0, 1)
        with pytest.raises(ValueError):
            init_variational((2,), 1.0, 0)


class TestSampleWeights:
    def test_zero_eps_is_mean(self):
        p = vp([[0.3, -1.0]], [[0.2, 0.1]])
        np.testing.assert_array_equal(sample_weights(p, np.zeros((1, 2))).data, p.mu.data)

    def test_standard_normal_passthrough(self):
        v = np.array([0.4, -2.0, 1.5])
        np.testing.assert_array_equal(sample_weights(vp(np.zeros(3), np.zeros(3)), v).data, v)

    def test_hand_value(self):
        w = sample_weights(vp([0.5], [math.log(2.0)]), np.array([0.3]))
        assert w.data[0] == pytest.approx(1.1, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(nd.DimensionError):
            sample_weights(vp(np.zeros(3), np.zeros(3)), np.zeros(2))

    def test_moments_over_draws(self):
        mu, s = 0.7, math.log(0.3)
        n = 10**5
        eps = nd.rng_normal((5, 0, 0, 0), n, np.float64)
        w = sample_weights(vp(np.full(n, mu), np.full(n, s)), eps).data
        std = math.exp(s)
        assert abs(w.mean() - mu) <= 4 * std / math.sqrt(n)
        assert abs(w.std() - std) <= 4 * std / math.sqrt(2 * n)


class TestRandLayerBackward:
    def test_kl_minimum_has_zero_gradient(self):
        sigma0 = 0.05
        p = vp(np.zeros(4), np.full(4, math.log(sigma0)))
        gm, gs = rand_layer_backward(np.zeros(4), p, np.ones(4), sigma0, 7)
        np.testing.assert_allclose(gm, 0.0, atol=1e-15)
        np.testing.assert_allclose(gs, 0.0, atol=1e-15)

    def test_hand_value(self):
        gm, gs = rand_layer_backward(np.array([1.0]), vp([0.5], [0.0]), np.array([0.3]), 1.0, 10)
        assert gm[0] == pytest.approx(1.05)
        assert gs[0] == pytest.approx(0.3)

    def test_hand_value_by_finite_differences(self):
        # loss(w) = w (so dloss/dw = 1) plus KL(mu, s)/N with sigma0=1, N=10
        def J(theta):
            mu, s = theta
            w = mu + math.exp(s) * 0.3
            return w + kl_gaussian(mu, math.exp(s), 0.0, 1.0) / 10

        g = nd.finite_diff_grad(J, [0.5, 0.0])
        np.testing.assert_allclose(g, [1.05, 0.3], rtol=1e-8)

    def test_random_case_matches_finite_differences(self, rng):
        sigma0, N = 0.2, 37
        mu = rng.normal(0, 0.3, (3, 4))
        s = rng.normal(-1.5, 0.3, (3, 4))
        eps = rng.standard_normal((3, 4))
        x = rng.standard_normal((5, 4))
        y = np.array([0, 2, 1, 1, 0])

        def loss_of_w(w):
            return nd.softmax_cross_entropy(nd.matmul(Tensor(x), nd.transpose(w)), y)

        wt = Tensor(mu + np.exp(s) * eps, requires_grad=True)
        with GradTape() as tape:
            out = loss_of_w(wt)
        (grad_out,) = tape.gradient(out, [wt])
        gm, gs = rand_layer_backward(grad_out, vp(mu, s), eps, sigma0, N)

        def J(mu_, s_):
            w = Tensor(mu_ + np.exp(s_) * eps)
            return loss_of_w(w).item() + np.sum(kl_gaussian(mu_, np.exp(s_), 0.0, sigma0)) / N

        assert nd.relative_error(gm, nd.finite_diff_grad(lambda m: J(m, s), mu), floor=1e-6) <= 1e-6
        assert nd.relative_error(gs, nd.finite_diff_grad(lambda v: J(mu, v), s), floor=1e-6) <= 1e-6


def test_reparameterization_gradients_unbiased():
    # h(w) = (w - c)^2, E[h] = (mu - c)^2 + exp(2s)
    mu, s, c = 0.4, math.log(0.5), -0.3
    eps = nd.rng_normal((11, 0, 0, 0), 10**4, np.float64)
    w = mu + math.exp(s) * eps
    dmu = 2 * (w - c)
    ds = 2 * (w - c) * math.exp(s) * eps
    exact_mu = 2 * (mu - c)
    exact_s = 2 * math.exp(2 * s)
    n = len(eps)
    assert abs(dmu.mean() - exact_mu) <= 4 * dmu.std() / math.sqrt(n)
    assert abs(ds.mean() - exact_s) <= 4 * ds.std() / math.sqrt(n)


class TestLinearForward:
    def test_identity_at_mean(self):
        x = Tensor(np.array([[0.3, -0.2], [1.0, 2.0]]))
        p = vp(np.eye(2), np.zeros((2, 2)))
        np.testing.assert_array_equal(variational_linear_forward(x, p, np.zeros((2, 2))).data, x.data)

    def test_hand_value(self):
        p = vp(np.eye(2), np.zeros((2, 2)))
        y = variational_linear_forward(Tensor(np.array([[1.0, 1.0]])), p, np.array([[0.5, 0.0], [0.0, -0.5]]))
        np.testing.assert_allclose(y.data, [[1.5, 0.5]])

    def test_eps_determinism(self):
        layer = VariationalLinear(3, 2, sigma0=0.5, dtype=np.float64)
        x = Tensor(np.ones((4, 3)))
        e1 = nd.rng_normal((0, 0, 0, 1), (2, 3), np.float64)
        e2 = nd.rng_normal((0, 0, 0, 2), (2, 3), np.float64)
        assert not np.array_equal(layer.forward(x, e1).data, layer.forward(x, e2).data)
        assert layer.forward(x, e1).data.tobytes() == layer.forward(x, e1).data.tobytes()


class TestConvForward:
    def test_pointwise_identity(self):
        x = np.random.default_rng(0).random((2, 3, 4, 4))
        p = vp(np.eye(3).reshape(3, 3, 1, 1), np.zeros((3, 3, 1, 1)))
        out = variational_conv2d_forward(Tensor(x), p, 1, 0, np.zeros((3, 3, 1, 1)))
        np.testing.assert_array_equal(out.data, x)

    def test_ones_kernel_on_constant_input(self):
        c = 0.25
        x = np.full((1, 1, 5, 5), c)
        p = vp(np.ones((1, 1, 3, 3)), np.zeros((1, 1, 3, 3)))
        out = variational_conv2d_forward(Tensor(x), p, 1, 1, np.zeros((1, 1, 3, 3))).data
        np.testing.assert_allclose(out[0, 0, 1:-1, 1:-1], 9 * c)
        assert out[0, 0, 0, 0] == pytest.approx(4 * c)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_against_six_loop_oracle(self, stride, padding, rng):
        x = rng.standard_normal((2, 2, 5, 6))
        mu = rng.standard_normal((3, 2, 3, 3))
        s = rng.normal(-1, 0.2, (3, 2, 3, 3))
        eps = rng.standard_normal((3, 2, 3, 3))
        out = variational_conv2d_forward(Tensor(x), vp(mu, s), stride, padding, eps).data
        ref = naive_conv(x, mu + np.exp(s) * eps, stride, padding)
        assert np.max(np.abs(out - ref)) <= 1e-6


class TestNetworkForward:
    def test_mean_mode_tiny_variance_matches_deterministic(self, f64):
        net = mlp(4, [8], 3, variational=True, sigma0=1e-7, seed=3)
        det = mlp(4, [8], 3, variational=False, seed=3, bias=False)
        for vl, dl in zip(net.variational_layers, [l for l in det.layers if isinstance(l, Linear)]):
            dl.weight.data[...] = vl.weight.mu.data
        x = np.random.default_rng(0).random((10, 4))
        eps = net.sample_eps((0, 0, 0, 0))
        np.testing.assert_allclose(net.forward(x, eps).data, det.forward(x).data, atol=1e-4)
        np.testing.assert_array_equal(net.forward(x, mean=True).data, det.forward(x).data)

    def test_single_layer_reduces_to_layer_forward(self, f64):
        layer = VariationalLinear(3, 2, sigma0=0.3)
        net = Network([layer], Prior(0.3))
        eps = net.sample_eps((1, 0, 0, 0))
        x = Tensor(np.ones((2, 3)))
        np.testing.assert_array_equal(net.forward(x, eps).data, variational_linear_forward(x, layer.weight, eps[0]).data)

    def test_fixed_eps_is_deterministic(self):
        net = mlp(2, [5], 2, variational=True, sigma0=0.3)
        eps = net.sample_eps((9, 9, 9, 9))
        x = np.random.default_rng(1).random((6, 2))
        assert net.forward(x, eps).data.tobytes() == net.forward(x, eps).data.tobytes()

    def test_stochastic_needs_eps(self):
        net = mlp(2, [5], 2, variational=True)
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 2)))

    def test_cnn_forward_shapes(self):
        from advbnn.bayes_net import small_cnn
        net = small_cnn((1, 8, 8), 4, variational=True)
        out = net.forward(np.zeros((3, 1, 8, 8), np.float32), net.sample_eps((0, 0, 0, 0)))
        assert out.shape == (3, 4)

    def test_n_params(self):
        net = mlp(4, [8], 3, variational=True)
        assert net.n_params == 4 * 8 + 8 * 3
        assert len(net.parameters()) == 4
        det = mlp(4, [8], 3, variational=False)
        assert det.n_params == 4 * 8 + 8 + 8 * 3 + 3
