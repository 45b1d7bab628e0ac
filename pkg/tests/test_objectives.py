import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from advbnn import nd_core as nd
from advbnn.attacks import AttackConfig, pgd_attack
from advbnn.bayes_net import Network, Prior, VariationalLinear, mlp
from advbnn.nd_core import GradTape, NoiseSource
from advbnn.objectives import elbo_clean, kl_gaussian, prior_kl, total_loss


def mc_kl(mu_s, sd_s, mu_t, sd_t, n, key):
    """Monte-Carlo KL: mean of log s(w) - log t(w) over w ~ s; returns (estimate, standard error)."""
    w = mu_s + sd_s * nd.rng_normal(key, n, np.float64)
    log_s = -np.log(sd_s) - 0.5 * ((w - mu_s) / sd_s) ** 2
    log_t = -np.log(sd_t) - 0.5 * ((w - mu_t) / sd_t) ** 2
    d = log_s - log_t
    return d.mean(), d.std() / math.sqrt(n)


class TestKLGaussian:
    def test_identical_is_zero(self):
        assert kl_gaussian(0, 1, 0, 1) == 0.0

    def test_closed_form_value(self):
        assert kl_gaussian(1, 2, 0, 1) == pytest.approx(2 - math.log(2), abs=1e-12)

    def test_monte_carlo_oracle(self):
        est, se = mc_kl(1.0, 2.0, 0.0, 1.0, 10**6, (21, 0, 0, 0))
        assert abs(kl_gaussian(1, 2, 0, 1) - est) <= 3 * se

    @pytest.mark.parametrize("sigma", [1e-3, 0.05, 1.0, 40.0])
    def test_scale_matched_identity(self, sigma):
        assert kl_gaussian(0, sigma, 0, sigma) == pytest.approx(0.0, abs=1e-12)

    def test_non_positive_sigma(self):
        with pytest.raises(ValueError):
            kl_gaussian(0, 0.0, 0, 1)
        with pytest.raises(ValueError):
            kl_gaussian(0, 1, 0, -1)

    def test_asymmetry(self):
        assert kl_gaussian(1, 2, 0, 1) != pytest.approx(kl_gaussian(0, 1, 1, 2))

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.01, 10), st.floats(-5, 5), st.floats(0.01, 10))
    def test_nonnegative_and_zero_iff_identical(self, ms, ss, mt, stt):
        kl = kl_gaussian(ms, ss, mt, stt)
        assert kl >= -1e-12
        if kl <= 1e-9:
            assert ms == pytest.approx(mt, abs=1e-3) and ss == pytest.approx(stt, rel=1e-3)

    def test_zero_only_on_diagonal_of_grid(self):
        grid = [(m, s) for m in (-1.0, 0.0, 0.5) for s in (0.1, 1.0, 3.0)]
        for a in grid:
            for b in grid:
                kl = kl_gaussian(a[0], a[1], b[0], b[1])
                assert (kl <= 1e-9) == (a == b)


def single_weight_net(mu, s, sigma0):
    layer = VariationalLinear(1, 1, sigma0=sigma0, dtype=np.float64)
    layer.weight.mu.data[...] = mu
    layer.weight.s.data[...] = s
    return Network([layer], Prior(sigma0))


class TestPriorKL:
    def test_posterior_equals_prior(self, f64):
        net = mlp(3, [4], 2, variational=True, sigma0=0.05)
        for p in net.variational_params():
            p.mu.data[...] = 0
        assert prior_kl(net).item() == pytest.approx(0.0, abs=1e-10)

    def test_single_weight(self):
        kl = prior_kl(single_weight_net(1.0, 0.0, 1.0)).item()
        assert kl == pytest.approx(0.5, abs=1e-12)
        est, se = mc_kl(1.0, 1.0, 0.0, 1.0, 10**6, (22, 0, 0, 0))
        assert abs(kl - est) <= 3 * se

    def test_decomposition(self, f64, rng):
        net = mlp(3, [6], 4, variational=True, sigma0=0.15, seed=2)
        for p in net.variational_params():
            p.s.data[...] = rng.normal(-2, 0.5, p.shape)
        expected = sum(np.sum(kl_gaussian(p.mu.data, np.exp(p.s.data), 0.0, 0.15)) for p in net.variational_params())
        assert abs(prior_kl(net).item() - expected) <= 1e-7 * expected

    def test_needs_variational_layer(self):
        with pytest.raises(ValueError):
            prior_kl(mlp(2, [3], 2, variational=False))


class TestTotalLoss:
    def setup_method(self):
        r = np.random.default_rng(5)
        self.x = r.random((8, 3))
        self.y = r.integers(0, 2, 8)

    def test_zero_kl_gives_ce(self, f64):
        net = mlp(3, [4], 2, variational=True, sigma0=0.05, alpha=0.3)
        for p in net.variational_params():
            p.mu.data[...] = 0
        lb = total_loss(net, self.x, self.y, net.sample_eps((0, 0, 0, 0)), n_tr=100)
        assert lb.total == pytest.approx(lb.ce, abs=1e-10)

    def test_breakdown_invariant_and_scaling(self, f64):
        net = mlp(3, [4], 2, variational=True, sigma0=0.05, alpha=0.5)
        eps = net.sample_eps((0, 0, 0, 1))
        a = total_loss(net, self.x, self.y, eps, n_tr=100)
        b = total_loss(net, self.x, self.y, eps, n_tr=200)
        assert a.total == pytest.approx(a.ce + a.alpha * a.kl / a.n_tr, rel=1e-6)
        assert a.kl >= 0
        assert b.ce == a.ce
        assert (b.total - b.ce) == pytest.approx((a.total - a.ce) / 2, rel=1e-9)

    def test_gradient_matches_finite_differences(self, f64):
        net = mlp(3, [5], 2, variational=True, sigma0=0.2, alpha=0.7, seed=4)
        for p in net.variational_params():
            p.s.data[...] = np.random.default_rng(1).normal(-1.5, 0.3, p.shape)
        eps = net.sample_eps((3, 0, 0, 0))
        params = net.parameters()
        with GradTape() as tape:
            lb = total_loss(net, self.x, self.y, eps, n_tr=50)
        grads = tape.gradient(lb.tensor, params)
        for p, g in zip(params, grads):
            def f(v, p=p):
                old = p.data.copy()
                p.data[...] = v
                val = total_loss(net, self.x, self.y, eps, n_tr=50).total
                p.data[...] = old
                return val
            assert nd.relative_error(g, nd.finite_diff_grad(f, p.data), floor=1e-6) <= 1e-6

    def test_deterministic_net_has_no_kl(self):
        net = mlp(3, [4], 2, variational=False)
        lb = total_loss(net, self.x.astype(np.float32), self.y, None, n_tr=10)
        assert lb.kl == 0 and lb.total == lb.ce


class TestElbo:
    def setup_method(self):
        r = np.random.default_rng(6)
        self.x = r.random((20, 3))
        self.y = r.integers(0, 3, 20)

    def test_identity_with_total_loss(self, f64):
        net = mlp(3, [5], 3, variational=True, sigma0=0.1, alpha=1.0)
        eps = net.sample_eps((0, 0, 0, 7))
        n = len(self.y)
        elbo = elbo_clean(net, self.x, self.y, eps_samples=[eps])
        lb = total_loss(net, self.x, self.y, eps, n_tr=n, alpha=1.0)
        assert elbo / n == pytest.approx(-lb.total, rel=1e-6)

    def test_nonpositive(self, f64):
        net = mlp(3, [5], 3, variational=True, sigma0=0.1)
        assert elbo_clean(net, self.x, self.y, m=4, noise=NoiseSource(1)) <= 0

    def test_variance_shrinks_with_samples(self, f64):
        net = mlp(3, [5], 3, variational=True, sigma0=0.5, seed=1)
        one = [elbo_clean(net, self.x, self.y, m=1, noise=NoiseSource(100 + r)) for r in range(30)]
        many = [elbo_clean(net, self.x, self.y, m=16, noise=NoiseSource(200 + r)) for r in range(30)]
        assert np.var(many, ddof=1) < np.var(one, ddof=1)

    def test_adversarial_term_below_clean(self, f64):
        net = mlp(3, [8], 3, variational=True, sigma0=0.1, seed=2)
        eps = net.sample_eps((0, 0, 0, 3))
        cfg = AttackConfig(gamma=0.05, k=10, eot=False, clip=None)
        x_adv = pgd_attack(net, self.x, self.y, cfg, eps=eps)
        clean = elbo_clean(net, self.x, self.y, eps_samples=[eps])
        adv = elbo_clean(net, x_adv, self.y, eps_samples=[eps])
        assert adv <= clean
