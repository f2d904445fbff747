import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from basketpc.numerics import DomainError
from basketpc.priors import (
    BERRY_GAMMA,
    PC,
    PRESET_NAMES,
    SD_RULE_CONSTANT,
    GammaOnPrecision,
    HalfT,
    RangeError,
    UniformOnSd,
    epc_from_halft,
    halft_cdf,
    halft_survival,
    implied_or_density,
    implied_or_mass,
    implied_theta_density,
    kld_gauss,
    lambda0,
    lambda_from_sd,
    lambda_htd,
    log_density_sd,
    pc_distance,
    preset,
    prior_from_config,
)


def _mass(prior, lo, hi):
    # integrate the sigma-scale density in log sigma, where every family is smooth
    f = lambda u: math.exp(float(prior.log_density(math.exp(u))) + u)
    return integrate.quad(f, math.log(lo), math.log(hi), limit=500, epsabs=1e-12, epsrel=1e-11)[0]


class TestDensities:
    def test_examples(self):
        np.testing.assert_allclose(log_density_sd(PC(2.0), 0.5), math.log(2.0) - 1.0, atol=1e-14)
        np.testing.assert_allclose(log_density_sd(UniformOnSd(0, 100), 50), math.log(0.01), atol=1e-14)
        np.testing.assert_allclose(log_density_sd(HalfT(10, 1), 10), math.log(1 / (10 * math.pi)), atol=1e-14)

    def test_uniform_outside_support(self):
        assert log_density_sd(UniformOnSd(1, 2), 3) == -math.inf

    def test_nonpositive_sigma(self):
        with pytest.raises(DomainError):
            log_density_sd(PC(1.0), 0.0)

    def test_gamma_change_of_variables(self):
        prior = GammaOnPrecision(2.0, 3.0)
        for s in (0.1, 0.7, 2.0, 9.0):
            tau = s ** -2
            expected = stats.gamma(a=2.0, scale=1 / 3.0).logpdf(tau) + math.log(2 * s ** -3)
            np.testing.assert_allclose(log_density_sd(prior, s), expected, rtol=1e-12)

    def test_halft_matches_scipy(self):
        for g, v in [(1, 1), (10, 1), (2, 5), (0.5, 20)]:
            s = np.array([0.01, 0.5, 3.0, 40.0])
            expected = np.log(2) + stats.t(df=v, scale=g).logpdf(s)
            np.testing.assert_allclose(HalfT(g, v).log_density(s), expected, rtol=1e-12)

    @pytest.mark.parametrize(
        "prior,lo,hi",
        [
            (PC(1.4276), 1e-12, 30.0),
            (PC(0.0637), 1e-12, 400.0),
            (HalfT(10.0, 1.0), 1e-12, 1e10),
            (HalfT(1.0, 5.0), 1e-12, 1e4),
            (GammaOnPrecision(2.0, 1.0), 1e-3, 1e5),
        ],
    )
    def test_normalized(self, prior, lo, hi):
        assert prior.cdf(hi) - prior.cdf(lo) >= 1 - 1e-8
        np.testing.assert_allclose(_mass(prior, lo, hi), 1.0, atol=1e-6)

    def test_uniform_normalized(self):
        p = UniformOnSd(0.0, 100.0)
        mass = integrate.quad(lambda s: math.exp(float(p.log_density(s))), 0, 100)[0]
        np.testing.assert_allclose(mass, 1.0, atol=1e-10)

    def test_berry_gamma_nonnegative(self):
        s = np.geomspace(1e-6, 1e4, 300)
        dens = np.exp(BERRY_GAMMA.log_density(s))
        assert np.all(dens >= 0) and np.all(np.isfinite(dens))

    @pytest.mark.parametrize("prior", [PC(1.4276), HalfT(10, 1), GammaOnPrecision(2.0, 1.0), UniformOnSd(0.0, 5.0)])
    def test_cdf_matches_density(self, prior):
        lo = 1e-6
        for s in (0.3, 1.0, 4.0):
            np.testing.assert_allclose(prior.cdf(s) - prior.cdf(lo), _mass(prior, lo, s), atol=1e-8)


class TestHalfT:
    def test_examples(self):
        assert halft_cdf(10, 1, 0) == 0.0
        np.testing.assert_allclose(halft_cdf(10, 1, 10), 0.5, atol=1e-12)
        np.testing.assert_allclose(halft_cdf(3, 2, 1e8), 1.0, atol=1e-12)

    @given(st.floats(0.5, 20), st.floats(0.5, 20), st.floats(0.0, 1e3))
    def test_against_student_t(self, g, v, x):
        np.testing.assert_allclose(halft_cdf(g, v, x), 2 * stats.t(df=v).cdf(x / g) - 1, atol=1e-10)

    @given(st.floats(0.5, 20), st.floats(0.5, 20), st.floats(0.0, 1e3))
    def test_survival_complement(self, g, v, x):
        assert abs(halft_cdf(g, v, x) + halft_survival(g, v, x) - 1.0) < 1e-10

    def test_domain(self):
        with pytest.raises(DomainError):
            halft_cdf(1, 1, -1)


class TestScaling:
    def test_lambda_from_sd(self):
        np.testing.assert_allclose(lambda_from_sd(1.0), 1.4276027, atol=1e-7)
        np.testing.assert_allclose(lambda_from_sd(2.242), 0.637, atol=1e-3)
        np.testing.assert_allclose(lambda_from_sd(10.0), 0.14276027, atol=1e-8)
        np.testing.assert_allclose(SD_RULE_CONSTANT, -0.31 * math.log(0.01), rtol=1e-15)
        with pytest.raises(DomainError):
            lambda_from_sd(0.0)

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_lambda_from_sd_monotone(self, a, b):
        if a < b:
            assert lambda_from_sd(a) > lambda_from_sd(b)
        np.testing.assert_allclose(lambda_from_sd(a) * a, SD_RULE_CONSTANT, rtol=1e-14)

    def test_lambda_htd_examples(self):
        np.testing.assert_allclose(lambda_htd(10, 1, 10), math.log(2) / 10, atol=1e-12)
        np.testing.assert_allclose(lambda_htd(1, 1, 1), math.log(2), atol=1e-12)
        np.testing.assert_allclose(lambda_htd(10, 1, 1e-6), 2 / (10 * math.pi), atol=1e-6)

    def test_lambda_htd_flattens(self):
        g, v = 2.0, 5.0
        xs = np.geomspace(1e3 * g, 1e6 * g, 40)
        vals = [lambda_htd(g, v, x) for x in xs]
        assert np.all(np.diff(vals) < 0) and vals[-1] < 1e-4

    def test_lambda_htd_errors(self):
        with pytest.raises(DomainError):
            lambda_htd(1, 1, 0)
        with pytest.raises(RangeError):
            lambda_htd(1, 10, 1e80)

    def test_lambda0_examples(self):
        np.testing.assert_allclose(lambda0(1, 1), 2 / math.pi, atol=1e-12)
        np.testing.assert_allclose(lambda0(10, 1), 0.0637, atol=1e-4)
        np.testing.assert_allclose(lambda0(1, 2), 1 / math.sqrt(2), atol=1e-12)

    def test_epc_half_cauchy(self):
        d = epc_from_halft(10, 1)
        np.testing.assert_allclose(d.lam, 0.064, atol=5e-4)
        assert abs(d.x_star - 17.1) <= 0.1
        assert d.x_star > d.x_peak
        np.testing.assert_allclose(lambda_htd(10, 1, d.x_star), d.lam, atol=1e-8)
        assert d.lam <= d.lambda0 + 1e-10 and abs(d.lam - d.lambda0) <= 1e-6
        assert d.prior() == PC(d.lam)

    def test_epc_other_dof(self):
        d = epc_from_halft(2, 5)
        np.testing.assert_allclose(d.lam, 0.380, atol=5e-4)
        np.testing.assert_allclose(lambda_htd(2, 5, d.x_star), d.lambda0, atol=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(st.floats(0.5, 20), st.floats(0.5, 20))
    def test_reference_interval_is_largest(self, g, v):
        d = epc_from_halft(g, v)
        # beyond x* the matching rate stays below the limit
        for x in d.x_star * np.array([1.001, 1.5, 3.0, 30.0]):
            assert lambda_htd(g, v, x) < d.lambda0


class TestImpliedOddsRatio:
    lam = lambda_from_sd(1.0)

    def test_mode_at_one(self):
        r = np.concatenate((np.linspace(0.2, 0.999, 200), np.linspace(1.001, 5, 200)))
        dens = implied_or_density(self.lam, r)
        below, above = dens[r < 1], dens[r > 1]
        assert np.all(np.diff(below) > 0) and np.all(np.diff(above) < 0)

    @given(st.floats(1e-3, 20))
    def test_theta_symmetric(self, theta):
        a, b = implied_theta_density(self.lam, [theta, -theta])
        assert abs(a - b) <= 1e-9 * max(1.0, a)

    @pytest.mark.parametrize("sd", [0.5, 1.0, 10.0])
    def test_integrates_to_one(self, sd):
        lam = lambda_from_sd(sd)
        # substitute r = exp(u): wide priors spread the mass over many decades of r
        f = lambda u: float(implied_or_density(lam, [math.exp(u)])[0]) * math.exp(u)
        total = integrate.quad(f, -600, 0, limit=400)[0] + integrate.quad(f, 0, 600, limit=400)[0]
        np.testing.assert_allclose(total, 1.0, atol=1e-5)

    def test_mass_near_one_for_small_sd(self):
        mass = implied_or_mass(lambda_from_sd(0.1), 0.8, 1.2)
        # Monte Carlo: sigma ~ Exp(lam), theta ~ N(0, sigma^2)
        rng = np.random.default_rng(11)
        sig = rng.exponential(1 / lambda_from_sd(0.1), 400_000)
        r = np.exp(rng.normal(0, sig))
        mc = np.mean((r > 0.8) & (r < 1.2))
        se = math.sqrt(mc * (1 - mc) / sig.size)
        assert abs(mass - mc) < 4 * se
        assert mass > 0.9

    def test_domain(self):
        with pytest.raises(DomainError):
            implied_or_density(1.0, [0.0])


class TestDivergence:
    def test_kld_examples(self):
        assert kld_gauss(1.3, 1.3, 5) == 0.0
        np.testing.assert_allclose(kld_gauss(2.0, 1.0, 4), 0.5 * (16 - 4 - 4 * math.log(4)), atol=1e-12)
        np.testing.assert_allclose(kld_gauss(2.0, 1.0, 4), 3.2274113, atol=1e-7)

    def test_kld_monte_carlo(self):
        rng = np.random.default_rng(5)
        s, s0, J = 1.7, 0.6, 3
        x = rng.normal(0, s, size=(200_000, J))
        logp = stats.norm(0, s).logpdf(x).sum(axis=1)
        logq = stats.norm(0, s0).logpdf(x).sum(axis=1)
        d = logp - logq
        se = d.std() / math.sqrt(d.size)
        assert abs(d.mean() - kld_gauss(s, s0, J)) < 3 * se

    def test_distance(self):
        assert pc_distance(1.0, 1.0, 1) == 1.0
        np.testing.assert_allclose(pc_distance(100.0, 1.0, 4), 200.0)
        for ratio in (100, 300, 1e4):
            d = pc_distance(ratio, 1.0, 4)
            assert abs(math.sqrt(2 * kld_gauss(ratio, 1.0, 4)) - d) / d < 0.01

    def test_domain(self):
        with pytest.raises(DomainError):
            kld_gauss(0.0, 1.0, 2)
        with pytest.raises(DomainError):
            pc_distance(1.0, -1.0, 2)


class TestPresets:
    def test_all_names_resolve(self):
        for name in PRESET_NAMES:
            assert preset(name).describe()["family"] in ("gamma", "uniform", "half-t", "pc")

    def test_values(self):
        assert preset("G") == GammaOnPrecision(0.0005, 0.000005)
        assert preset("U") == UniformOnSd(0.0, 100.0)
        assert preset("HT") == HalfT(10.0, 1.0)
        np.testing.assert_allclose(preset("PC5").rate, 1.4276027 / 5, rtol=1e-7)
        np.testing.assert_allclose(preset("EPC").rate, lambda0(10, 1), rtol=1e-15)

    def test_config_families(self):
        np.testing.assert_allclose(prior_from_config("PC", [22.425]).rate, 0.06366, atol=1e-5)
        assert prior_from_config("half-t", [10, 1]) == HalfT(10, 1)
        assert prior_from_config("EPC", [1, 1]) == PC(lambda0(1, 1))
        with pytest.raises(KeyError):
            preset("nope")
