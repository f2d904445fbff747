import math
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from basketpc import inference
from basketpc.inference import (
    AccuracyWarning,
    HyperPrior,
    InferenceError,
    ModelData,
    fit,
    log_joint,
    oracle_fit,
)
from basketpc.numerics import DomainError
from basketpc.priors import PC, HalfT, lambda_from_sd, preset

PC1 = HyperPrior(PC(lambda_from_sd(1.0)))
HT = HyperPrior(HalfT(10.0, 1.0))


def brute_force_tail(y, n, lam, t, n_mu=401, n_u=200, n_z=1201):
    """Pr(p_j > t) by tensor-product rules, with sigma ~ Exp(lam) and mu ~ N(0, 100).

    sigma is placed at midpoints of its prior CDF so the sigma weights are
    equal; eta_j = mu + sigma z is integrated over z with the trapezoidal
    rule, and the tail part uses the piecewise-linear interpolant of the
    integrand clipped at the threshold.
    """
    c = math.log(t / (1 - t))
    mu = np.linspace(-40, 40, n_mu)
    mu_w = np.exp(-0.5 * mu**2 / 100.0)
    u = (np.arange(n_u) + 0.5) / n_u
    sig = -np.log1p(-u) / lam
    z = np.linspace(-9, 9, n_z)
    dz = z[1] - z[0]
    phi = np.exp(-0.5 * z**2)
    trap = np.full(n_z, dz)
    trap[[0, -1]] *= 0.5
    J = len(y)
    num = np.zeros(J)
    den = 0.0
    for s in sig:
        eta = mu[:, None] + s * z[None, :]
        g0 = z[None, :]
        # position of the threshold along z for each mu
        z0 = (c - mu) / s
        A = np.empty((J, n_mu))
        B = np.empty((J, n_mu))
        for j in range(J):
            logl = y[j] * eta - n[j] * np.logaddexp(0, eta)
            g = np.exp(logl) * phi[None, :]
            A[j] = g @ trap
            # trapezoid of the part above z0: full cells plus the split cell
            above = (g0 >= z0[:, None])
            full = np.where(above[:, 1:] & above[:, :-1], 0.5 * (g[:, 1:] + g[:, :-1]) * dz, 0.0).sum(axis=1)
            k = np.clip(np.searchsorted(z, z0) - 1, 0, n_z - 2)
            rows = np.arange(n_mu)
            inside = (z0 > z[0]) & (z0 < z[-1])
            zl, zr = z[k], z[k + 1]
            gl, gr = g[rows, k], g[rows, k + 1]
            gz0 = gl + (gr - gl) * (z0 - zl) / dz
            split = np.where(inside, 0.5 * (gz0 + gr) * (zr - z0), 0.0)
            B[j] = full + split
        prodA = A.prod(axis=0)
        den += np.sum(mu_w * prodA)
        for j in range(J):
            num[j] += np.sum(mu_w * prodA / A[j] * B[j])
    return num / den


def direct_single_arm(y, n, prior, t):
    """One arm: mu integrates out analytically, eta ~ N(0, 100 + sigma^2)."""
    c = math.log(t / (1 - t))

    def inner(s, lo, hi):
        v = 100.0 + s * s
        f = lambda e: math.exp(y * e - n * np.logaddexp(0, e) - 0.5 * e * e / v) / math.sqrt(v)
        return integrate.quad(f, lo, hi, limit=200, epsabs=0, epsrel=1e-11)[0]

    def outer(lo, hi):
        g = lambda s: math.exp(float(prior.log_density(s))) * inner(s, lo, hi)
        return integrate.quad(g, 0, np.inf, limit=200, epsabs=0, epsrel=1e-10)[0]

    tail = outer(c, np.inf)
    return tail / (tail + outer(-np.inf, c))


class TestModelData:
    def test_validation(self):
        with pytest.raises(DomainError):
            ModelData((3,), (2,))
        with pytest.raises(DomainError):
            ModelData((1, 2), (3,))
        with pytest.raises(DomainError):
            ModelData((), ())
        assert ModelData([1, 2], [3, 4]).J == 2

    def test_thresholds_validated(self):
        with pytest.raises(DomainError):
            fit(ModelData((1,), (2,)), PC1, [1.0])
        with pytest.raises(DomainError):
            fit(ModelData((1,), (2,)), PC1, [])


class TestLogJoint:
    def test_example(self):
        data = ModelData((1,), (2,))
        hp = HyperPrior(PC(1.0))
        # eta = 0: loglik = -2 log 2; theta = 0 at sigma = 1; mu = 0; PC density e^{-1}, Jacobian 1
        expected = -2 * math.log(2) - 0.5 * math.log(2 * math.pi) - 0.5 * math.log(200 * math.pi) - 1.0
        np.testing.assert_allclose(log_joint(data, hp, 0.0, 0.0, [0.0]), expected, atol=1e-12)

    def test_no_patients_gives_log_prior(self):
        hp = HyperPrior(HalfT(10.0, 1.0))
        mu, ls, theta = 0.7, -0.4, np.array([0.3, -1.1])
        sigma = math.exp(ls)
        expected = (
            np.sum(-0.5 * (theta / sigma) ** 2 - ls - 0.5 * math.log(2 * math.pi))
            - 0.5 * mu**2 / 100 - 0.5 * math.log(200 * math.pi)
            + float(hp.sigma_prior.log_density(sigma)) + ls
        )
        np.testing.assert_allclose(log_joint(ModelData((0, 0), (0, 0)), hp, mu, ls, theta), expected, rtol=1e-13)

    def test_shape_checked(self):
        with pytest.raises(DomainError):
            log_joint(ModelData((1, 1), (2, 2)), PC1, 0.0, 0.0, [0.0])


class TestFitExamples:
    def test_identical_arms_equal(self):
        res = fit(ModelData((3, 3, 3), (10, 10, 10)), PC1, [0.2, 0.35])
        np.testing.assert_allclose(res.probs, np.repeat(res.probs[:1], 3, axis=0), atol=1e-12)

    def test_all_responders(self):
        res = fit(ModelData((10, 10), (10, 10)), HT, [0.5])
        assert np.all(res.probs > 0.95)

    def test_no_data_symmetric(self):
        res = fit(ModelData((0, 0), (0, 0)), PC1, [0.5])
        np.testing.assert_allclose(res.probs, 0.5, atol=1e-3)

    def test_tail_prob_lookup(self):
        res = fit(ModelData((1, 4), (10, 10)), PC1, [0.2, 0.275], with_means=True)
        assert res.tail_prob(1, 0.275) == res.probs[1, 1]
        assert res.means.shape == (2,) and res.means[1] > res.means[0]
        with pytest.raises(KeyError):
            res.tail_prob(0, 0.3)

    def test_diagnostics(self):
        d = fit(ModelData((2, 5), (15, 15)), HT, [0.275]).grid_diag
        assert d["mass_captured"] > 1 - 1e-4 and d["warning"] is None
        assert d["n_nodes"] > 0 and d["sigma_range"][0] < d["sigma_range"][1]


class TestAgainstReferences:
    def test_brute_force_two_arms(self):
        lam = lambda_from_sd(1.0)
        ref = brute_force_tail((0, 2), (2, 2), lam, 0.275)
        hp = HyperPrior(PC(lam))
        got = fit(ModelData((0, 2), (2, 2)), hp, [0.275]).probs[:, 0]
        np.testing.assert_allclose(got, ref, atol=1e-3)
        orc = oracle_fit(ModelData((0, 2), (2, 2)), hp, [0.275]).probs[:, 0]
        np.testing.assert_allclose(orc, ref, atol=1e-3)

    @pytest.mark.parametrize("y,n", [(3, 10), (0, 15), (14, 15)])
    @pytest.mark.parametrize("name", ["HT", "PC1"])
    def test_direct_single_arm(self, y, n, name):
        hp = HyperPrior(preset(name))
        ref = direct_single_arm(y, n, hp.sigma_prior, 0.275)
        got = fit(ModelData((y,), (n,)), hp, [0.275]).probs[0, 0]
        np.testing.assert_allclose(got, ref, atol=1e-3)
        orc = oracle_fit(ModelData((y,), (n,)), hp, [0.275]).probs[0, 0]
        np.testing.assert_allclose(orc, ref, atol=1e-4)

    @pytest.mark.parametrize("y,n", [((0, 6, 9), (15, 15, 15)), ((2, 3), (8, 15)), ((5, 1, 5), (15, 15, 15))])
    @pytest.mark.parametrize("name", ["HT", "PC1", "PC10", "EPC", "U"])
    def test_oracle(self, y, n, name):
        hp = HyperPrior(preset(name))
        data = ModelData(y, n)
        ts = [0.2, 0.275]
        np.testing.assert_allclose(fit(data, hp, ts).probs, oracle_fit(data, hp, ts).probs, atol=1e-3)

    def test_oracle_refuses_large_j(self):
        with pytest.raises(DomainError):
            oracle_fit(ModelData((1, 1, 1, 1), (5, 5, 5, 5)), PC1, [0.5])


data_strategy = st.integers(1, 4).flatmap(
    lambda J: st.lists(st.integers(1, 20), min_size=J, max_size=J).flatmap(
        lambda n: st.tuples(st.just(tuple(n)), st.tuples(*[st.integers(0, k) for k in n]))
    )
)


class TestFitProperties:
    @settings(max_examples=30, deadline=None)
    @given(data_strategy, st.sampled_from(["HT", "PC1", "PC10", "U"]))
    def test_monotone_in_threshold(self, nd, name):
        n, y = nd
        res = fit(ModelData(y, n), HyperPrior(preset(name)), [0.1, 0.2, 0.35, 0.6])
        assert np.all(np.diff(res.probs, axis=1) <= 1e-12)
        assert np.all((res.probs >= 0) & (res.probs <= 1))

    @settings(max_examples=30, deadline=None)
    @given(data_strategy, st.data())
    def test_monotone_in_responders(self, nd, draw):
        n, y = nd
        j = draw.draw(st.integers(0, len(n) - 1))
        if y[j] == n[j]:
            return
        y2 = list(y)
        y2[j] += 1
        a = fit(ModelData(y, n), HT, [0.275]).probs[j, 0]
        b = fit(ModelData(y2, n), HT, [0.275]).probs[j, 0]
        # slack at the level of the engine's quadrature error
        assert b >= a - 2e-4

    @settings(max_examples=30, deadline=None)
    @given(data_strategy, st.randoms(use_true_random=False))
    def test_permutation_invariant(self, nd, rnd):
        n, y = nd
        perm = list(range(len(n)))
        rnd.shuffle(perm)
        a = fit(ModelData(y, n), PC1, [0.275]).probs
        b = fit(ModelData([y[p] for p in perm], [n[p] for p in perm]), PC1, [0.275]).probs
        np.testing.assert_allclose(b, a[perm], atol=1e-10)

    def test_pooled_means_between_raw_and_pooled(self):
        y, n = np.array([1, 4, 8]), np.array([10, 12, 10])
        data = ModelData(y, n)
        # at lambda = 100 every arm collapses onto the common mean, which the mu prior
        # moves a few 1e-6 off the raw pooled proportion, so use a strong but finite rate
        strong = fit(data, HyperPrior(PC(10.0)), [0.5], with_means=True).means
        weak = fit(data, HyperPrior(PC(0.01)), [0.5], with_means=True).means
        raw, pooled = y / n, y.sum() / n.sum()
        lo, hi = np.minimum(raw, pooled), np.maximum(raw, pooled)
        assert np.all((strong > lo) & (strong < hi))
        assert np.ptp(strong) < np.ptp(weak)

    def test_pooling_direction(self):
        data = ModelData((1, 8, 8), (10, 10, 10))
        strong = fit(data, HyperPrior(PC(100.0)), [0.3]).probs[:, 0]
        weak = fit(data, HyperPrior(PC(0.01)), [0.3]).probs[:, 0]
        # strong borrowing pulls the poor arm up and the good arms down
        assert strong[0] > weak[0] + 0.1
        assert strong[1] < weak[1]


@dataclass(frozen=True)
class _BrokenPrior(PC):
    def log_density(self, sigma):
        return np.full(np.shape(sigma), np.nan)


class TestFailures:
    def test_inference_error_names_prior(self):
        with pytest.raises(InferenceError, match="pc"):
            fit(ModelData((1, 2), (5, 5)), HyperPrior(_BrokenPrior(1.0)), [0.3])

    def test_accuracy_warning(self, monkeypatch):
        # a narrow region drops enough posterior mass to trip the check
        monkeypatch.setattr(inference, "_REGION_DROP", 0.5)
        with pytest.warns(AccuracyWarning):
            res = fit(ModelData((1, 9), (10, 10)), HT, [0.3])
        assert res.grid_diag["warning"] is not None
