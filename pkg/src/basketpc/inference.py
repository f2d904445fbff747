"""Posterior tail probabilities for the hierarchical binomial-logit model.

    y_j ~ Binomial(n_j, expit(mu + theta_j)),  theta_j ~ N(0, sigma^2),
    mu ~ N(mu_mean, mu_var),  sigma ~ prior on the standard deviation.

Given (mu, sigma) the arms are independent, so ``fit`` integrates each
eta_j = mu + theta_j exactly in one dimension and mixes over a grid in
(mu, log sigma).  The grid is placed in three passes: a coarse scan of
log sigma using Laplace approximations to locate where the posterior
lives, Gauss-Legendre nodes in log sigma over that region, and for every
sigma node a Gauss-Legendre rule in mu built around the conditional mode.

``oracle_fit`` is a slow brute-force reference used to validate ``fit``.
"""

from __future__ import annotations

import functools
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import fft, special

from . import _kernels
from .numerics import DomainError
from .priors import PriorSpec

__all__ = [
    "InferenceError",
    "AccuracyWarning",
    "ModelData",
    "HyperPrior",
    "PosteriorResult",
    "log_joint",
    "fit",
    "oracle_fit",
]


class InferenceError(ArithmeticError):
    """The posterior could not be evaluated (non-finite values on the grid)."""


class AccuracyWarning(UserWarning):
    """The grid may not capture the posterior mass to the required accuracy."""


@dataclass(frozen=True)
class ModelData:
    """Responders ``y`` out of ``n`` enrolled, per arm."""

    y: tuple
    n: tuple

    def __post_init__(self):
        y = tuple(int(v) for v in self.y)
        n = tuple(int(v) for v in self.n)
        if len(y) != len(n):
            raise DomainError("y and n must have the same length")
        if len(y) < 1:
            raise DomainError("need at least one arm")
        for j, (a, b) in enumerate(zip(y, n)):
            if b < 0 or a < 0 or a > b:
                raise DomainError(f"arm {j}: need 0 <= y <= n, got y={a}, n={b}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "n", n)

    @property
    def J(self) -> int:
        return len(self.y)

    def arrays(self):
        return np.asarray(self.y, dtype=float), np.asarray(self.n, dtype=float)


@dataclass(frozen=True)
class HyperPrior:
    """Normal(mu_mean, mu_var) on the common effect and a prior on the arm sd."""

    sigma_prior: PriorSpec
    mu_mean: float = 0.0
    mu_var: float = 100.0

    def __post_init__(self):
        if not (self.mu_var > 0 and math.isfinite(self.mu_var)):
            raise DomainError("mu_var must be positive and finite")


@dataclass(frozen=True)
class PosteriorResult:
    """Tail probabilities Pr(p_j > t | data) for each arm j and threshold t.

    ``probs[j, k]`` belongs to ``thresholds[k]``.  ``means`` holds the
    posterior means of p_j when requested.
    """

    thresholds: tuple
    probs: np.ndarray
    log_evidence: float
    grid_diag: dict = field(default_factory=dict)
    means: Optional[np.ndarray] = None

    def tail_prob(self, j: int, t: float) -> float:
        for k, tk in enumerate(self.thresholds):
            if tk == t:
                return float(self.probs[j, k])
        raise KeyError(f"threshold {t} was not requested; have {self.thresholds}")


def _logit_thresholds(thresholds) -> tuple:
    ts = tuple(float(t) for t in np.atleast_1d(thresholds))
    if not ts:
        raise DomainError("need at least one threshold")
    for t in ts:
        if not 0.0 < t < 1.0:
            raise DomainError(f"thresholds must lie in (0, 1), got {t}")
    return ts


def log_joint(data: ModelData, hp: HyperPrior, mu: float, log_sigma: float, theta) -> float:
    """Log joint density of data and parameters on the (mu, log sigma, theta) scale.

    The binomial coefficients are left out.  The last term is the Jacobian
    of sigma = exp(log_sigma).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (data.J,):
        raise DomainError(f"theta must have length {data.J}, got shape {theta.shape}")
    y, n = data.arrays()
    sigma = math.exp(log_sigma)
    eta = mu + theta
    loglik = float(np.sum(y * eta - n * np.logaddexp(0.0, eta)))
    log_theta = float(np.sum(-0.5 * (theta / sigma) ** 2 - log_sigma - 0.5 * math.log(2 * math.pi)))
    d = mu - hp.mu_mean
    log_mu = -0.5 * d * d / hp.mu_var - 0.5 * math.log(2 * math.pi * hp.mu_var)
    log_sig = float(hp.sigma_prior.log_density(sigma)) + log_sigma
    return loglik + log_theta + log_mu + log_sig


# ---------------------------------------------------------------------------
# grid engine

_COARSE_STEP = 0.5
_MU_DROP = 20.0
_REGION_DROP = 20.0
_TAIL_DROP = 10.0
# per coarse interval: (change of the log marginal, curvature of the Laplace tail
# probabilities, change of the shrinkage ratios) below which one or two nodes suffice
_FLAT = (0.05, 0.005, 0.002)
_SMOOTH = (1.0, 0.5, 0.3)
_MAX_MERGE = 8


@functools.lru_cache(maxsize=None)
def _unit_gl(n):
    x, w = np.polynomial.legendre.leggauss(n)
    x, w = 0.5 * (x + 1.0), 0.5 * w
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@functools.lru_cache(maxsize=64)
def _coarse_grid(prior):
    lo, hi = prior.support()
    span = math.log(hi) - math.log(lo)
    u = np.linspace(math.log(lo), math.log(hi), int(math.ceil(span / _COARSE_STEP)) + 1)
    mid = np.exp(0.5 * (u[1:] + u[:-1]))
    cdf = np.concatenate(([0.0], prior.cdf(mid), [1.0]))
    with np.errstate(divide="ignore"):
        log_cell = np.log(np.diff(cdf))
    cdf_nodes = prior.cdf(np.exp(u))
    for arr in (u, log_cell, cdf_nodes):
        arr.flags.writeable = False
    return u, log_cell, cdf_nodes


@functools.lru_cache(maxsize=4096)
def _prior_gauss(prior, u0, u1, m):
    """m-point Gauss rule on [u0, u1] for the prior measure of log sigma.

    Built by the Stieltjes procedure on a fine Gauss-Legendre discretization
    of the measure, so that integrating a smooth g(log sigma) against the
    prior only needs g to be smooth, not the prior density.
    Returns (nodes, log weights).
    """
    x, w = _unit_gl(48)
    t = u0 + (u1 - u0) * x
    with np.errstate(divide="ignore"):
        lw = np.log((u1 - u0) * w) + prior.log_density(np.exp(t)) + t
    if np.any(np.isnan(lw)):
        raise InferenceError(f"prior density is not a number under prior {prior.describe()}")
    if not np.any(np.isfinite(lw)):
        return np.empty(0), np.empty(0)
    omega = np.exp(lw - lw.max())
    mass_scale = lw.max()
    z = 2.0 * x - 1.0
    # three-term recurrence of the monic orthogonal polynomials
    alpha = np.zeros(m)
    beta = np.zeros(m)
    p_prev = np.zeros_like(z)
    p_cur = np.ones_like(z)
    norm_prev = 1.0
    for k in range(m):
        norm = np.sum(omega * p_cur**2)
        alpha[k] = np.sum(omega * z * p_cur**2) / norm
        beta[k] = np.sum(omega) if k == 0 else norm / norm_prev
        p_next = (z - alpha[k]) * p_cur - (beta[k] if k > 0 else 0.0) * p_prev
        p_prev, p_cur, norm_prev = p_cur, p_next, norm
    jac = np.diag(alpha) + np.diag(np.sqrt(beta[1:]), 1) + np.diag(np.sqrt(beta[1:]), -1)
    nodes, vecs = np.linalg.eigh(jac)
    weights = beta[0] * vecs[0] ** 2
    nodes = u0 + (u1 - u0) * 0.5 * (nodes + 1.0)
    with np.errstate(divide="ignore"):
        return nodes, np.log(weights) + mass_scale


def _sigma_nodes(prior, y, n, cuts, hp, n_core):
    """Log-sigma nodes with log prior weights.

    A coarse scan with Laplace approximations to the marginal likelihood
    scores equally spaced points in log sigma.  Intervals whose posterior
    score is more than _REGION_DROP nats below the best are skipped.  The
    rest become panels with a Gauss rule for the prior measure, so the rule
    only has to resolve the likelihood: one node where it is flat (runs of
    flat intervals are merged), up to ``n_core`` where it changes.  Prior
    mass outside the covered range is lumped onto nodes at its two ends.
    """
    u, log_cell, cdf_nodes = _coarse_grid(prior)
    sig = np.exp(u)
    mode, sd, logm, _, _ = _kernels.mu_profile(y, n, hp.mu_mean, hp.mu_var, sig, _MU_DROP)
    tails = _kernels.laplace_tails(y, n, cuts, sig, mode, sd)
    score = logm + log_cell
    score = np.where(np.isnan(score), -np.inf, score)
    if not np.any(np.isfinite(score)):
        raise InferenceError(f"log posterior is not finite anywhere under prior {prior.describe()}")
    top = score.max()
    drop = top - np.maximum(score[1:], score[:-1])
    vary = np.abs(np.diff(logm))
    tails = tails.reshape(u.size, -1)
    # a one-node rule is exact for tails linear in log sigma, so only curvature matters
    curv = np.zeros(u.size)
    curv[1:-1] = np.abs(tails[2:] - 2.0 * tails[1:-1] + tails[:-2]).max(axis=1)
    curv_i = np.maximum(curv[1:], curv[:-1])
    # sigma enters the posterior through sigma^2 / (sigma^2 + tau^2), with tau^2 the
    # likelihood variance of each arm and the prior variance of mu
    ph = (y + 0.5) / (n + 1.0)
    taus = np.concatenate((1.0 / (n * ph * (1.0 - ph) + 1.0 / hp.mu_var), [hp.mu_var]))
    s2 = np.exp(2.0 * u)[:, None]
    ratio = s2 / (s2 + taus[None, :])
    shift = np.abs(np.diff(ratio, axis=0)).max(axis=1)
    flat = (vary < _FLAT[0]) & (curv_i < _FLAT[1]) & (shift < _FLAT[2])
    smooth = (vary < _SMOOTH[0]) & (curv_i < _SMOOTH[1]) & (shift < _SMOOTH[2])
    order = np.where(flat, 1, np.where(smooth, min(2, n_core), n_core))
    order = np.where(drop > 4.0, np.minimum(order, 2), order)
    order = np.where(drop > 8.0, 1, order)
    order = np.where(drop > _REGION_DROP, 0, order)
    used = np.flatnonzero(order > 0)
    w_all = np.exp(score - top)
    covered = np.zeros(u.size, bool)
    covered[used] = True
    covered[used + 1] = True
    captured = float(w_all[covered].sum() / w_all.sum())

    nodes = []
    logw = []
    i = used[0]
    last = used[-1]
    while i <= last:
        if order[i] == 0:
            i += 1
            continue
        j = i
        if order[i] == 1 and flat[i]:
            # extend while the log marginal stays flat and the tails stay near linear
            while j + 1 <= last and flat[j + 1] and j + 1 - i < _MAX_MERGE:
                k = j + 2
                if abs(logm[k] - logm[i]) >= _FLAT[0] or np.abs(ratio[k] - ratio[i]).max() >= _FLAT[2]:
                    break
                frac = (u[i + 1:k] - u[i]) / (u[k] - u[i])
                lin = tails[i][None, :] + frac[:, None] * (tails[k] - tails[i])[None, :]
                if np.abs(tails[i + 1:k] - lin).max() >= _FLAT[1]:
                    break
                j += 1
        x, lw = _prior_gauss(prior, float(u[i]), float(u[j + 1]), int(order[i]))
        nodes.append(x)
        logw.append(lw)
        i = j + 1
    uu = np.concatenate(nodes)
    lw = np.concatenate(logw)
    a, b = u[used[0]], u[last + 1]
    lump_lo = float(cdf_nodes[used[0]])
    lump_hi = float(1.0 - cdf_nodes[last + 1])
    lumps = [0.0, 0.0]
    if lump_lo > 0.0:
        uu = np.concatenate(([a], uu))
        lw = np.concatenate(([math.log(lump_lo)], lw))
        lumps[0] = lump_lo
    if lump_hi > 0.0:
        uu = np.concatenate((uu, [b]))
        lw = np.concatenate((lw, [math.log(lump_hi)]))
        lumps[1] = lump_hi
    return uu, lw, lumps, (math.exp(a), math.exp(b)), captured


def fit(
    data: ModelData,
    hp: HyperPrior,
    thresholds: Sequence[float],
    *,
    with_means: bool = False,
    n_sigma: int = 3,
    n_mu: int = 5,
    n_eta: int = 10,
) -> PosteriorResult:
    """Posterior tail probabilities Pr(p_j > t | data) by grid quadrature.

    ``n_sigma`` is the largest Gauss order of a log-sigma panel; ``n_mu``
    and ``n_eta`` are the Gauss-Legendre orders on each mu piece and each
    eta piece.
    """
    ts = _logit_thresholds(thresholds)
    cuts = special.logit(np.asarray(ts))
    y, n = data.arrays()
    prior = hp.sigma_prior
    u, lw_sigma, lumps, sigma_range, captured = _sigma_nodes(prior, y, n, cuts, hp, n_sigma)
    sig = np.exp(u)
    mode, sd, _, r_lo, r_hi = _kernels.mu_profile(y, n, hp.mu_mean, hp.mu_var, sig, _MU_DROP)
    mx, mw = _unit_gl(n_mu)
    mus, logw, owner = _kernels.mu_grid(y, n, cuts, sig, mode, sd, r_lo, r_hi, mx, mw)
    sigmas = sig[owner]
    d = mus - hp.mu_mean
    logw = logw + lw_sigma[owner] - 0.5 * d * d / hp.mu_var - 0.5 * math.log(2 * math.pi * hp.mu_var)

    P, J, K = mus.size, data.J, cuts.size
    logL = np.empty((P, J))
    frac = np.empty((P, J, K))
    pmean = np.empty((P, J)) if with_means else np.empty((1, 1))
    ux, uw = _unit_gl(n_eta)
    _kernels.arm_integrals(y, n, mus, sigmas, cuts, ux, uw, with_means, logL, frac, pmean)

    logw = logw + logL.sum(axis=1)
    if np.any(np.isnan(logw)) or np.any(logw == np.inf):
        raise InferenceError(f"non-finite log posterior on the grid under prior {prior.describe()}")
    finite = np.isfinite(logw)
    if not np.any(finite):
        raise InferenceError(f"posterior has no finite mass under prior {prior.describe()}")
    top = logw[finite].max()
    W = np.where(finite, np.exp(logw - top), 0.0)
    total = W.sum()
    probs = np.einsum("p,pjk->jk", W, frac) / total
    probs = np.clip(probs, 0.0, 1.0)
    means = (W @ pmean) / total if with_means else None
    if not np.all(np.isfinite(probs)):
        raise InferenceError(f"non-finite tail probability under prior {prior.describe()}")

    # share of posterior weight on the lumped end nodes
    Ws = np.bincount(owner, weights=W, minlength=sig.size) / total
    edge_lo = float(Ws[0]) if lumps[0] > 0 else 0.0
    edge_hi = float(Ws[-1]) if lumps[1] > 0 else 0.0
    diag = {
        "sigma_range": sigma_range,
        "n_sigma_nodes": int(sig.size),
        "n_nodes": int(P),
        "mass_captured": captured,
        "edge_mass_low": edge_lo,
        "edge_mass_high": edge_hi,
        "warning": None,
    }
    if captured < 1.0 - 1e-4:
        diag["warning"] = f"grid captures only {captured:.6f} of the posterior mass"
        warnings.warn(diag["warning"], AccuracyWarning, stacklevel=2)
    return PosteriorResult(
        thresholds=ts,
        probs=probs,
        log_evidence=float(top + math.log(total)),
        grid_diag=diag,
        means=means,
    )


# ---------------------------------------------------------------------------
# brute-force reference

_ORACLE_H = 0.025
_ORACLE_HALF = 50.0
_ORACLE_SIGMA_NODES = 241


def _oracle_kernel_fft(sig, h, M, L):
    # cell-averaged N(0, sigma^2) weights for offsets d = -(M-1) .. M-1, in circular order
    d = np.arange(M, dtype=float)
    z_hi = (d[None, :] + 0.5) * h / sig[:, None]
    z_lo = (d[None, :] - 0.5) * h / sig[:, None]
    pos = special.ndtr(-z_lo) - special.ndtr(-z_hi)
    pos[:, 0] = 1.0 - 2.0 * special.ndtr(-0.5 * h / sig)
    ker = np.zeros((sig.size, L))
    ker[:, :M] = pos
    ker[:, L - M + 1:] = pos[:, 1:][:, ::-1]
    return fft.rfft(ker, axis=1)


def _oracle_weights_sigma(prior, n_nodes):
    lo, hi = prior.support()
    u = np.linspace(math.log(lo), math.log(hi), n_nodes)
    step = u[1] - u[0]
    simpson = np.ones(n_nodes)
    simpson[1:-1:2] = 4.0
    simpson[2:-1:2] = 2.0
    simpson *= step / 3.0
    # exp(log(x)) can round past the support ends
    s = np.clip(np.exp(u), lo, hi)
    w = simpson * np.exp(prior.log_density(s)) * s
    w[0] += float(prior.cdf(lo))
    w[-1] += float(1.0 - prior.cdf(hi))
    return s, w


def oracle_fit(
    data: ModelData,
    hp: HyperPrior,
    thresholds: Sequence[float],
    *,
    h: float = _ORACLE_H,
    n_sigma: int = _ORACLE_SIGMA_NODES,
) -> PosteriorResult:
    """Dense brute-force quadrature over (mu, sigma, eta_1 .. eta_J), for J <= 3.

    For each threshold the eta axis is a uniform lattice of width ``h``
    with the threshold on a cell boundary; mu uses the same lattice, so
    the Gaussian coupling of every arm becomes a discrete convolution with
    cell-averaged normal weights, done by FFT for all sigma nodes at once.
    Log sigma uses Simpson's rule over the prior support with the prior
    mass outside lumped onto the end nodes.
    """
    if data.J > 3:
        raise DomainError(f"oracle_fit is limited to J <= 3 arms, got {data.J}")
    if n_sigma % 2 == 0:
        n_sigma += 1
    ts = _logit_thresholds(thresholds)
    y, n = data.arrays()
    prior = hp.sigma_prior
    sig, wsig = _oracle_weights_sigma(prior, n_sigma)
    keep = wsig > 0
    sig, wsig = sig[keep], wsig[keep]
    M = int(round(2 * _ORACLE_HALF / h))
    L = fft.next_fast_len(2 * M)
    kern = _oracle_kernel_fft(sig, h, M, L)

    J = data.J
    probs = np.empty((J, len(ts)))
    log_ev = None
    for k, t in enumerate(ts):
        c = math.log(t / (1.0 - t))
        grid = c - _ORACLE_HALF + (np.arange(M) + 0.5) * h
        mu_w = h * np.exp(-0.5 * (grid - hp.mu_mean) ** 2 / hp.mu_var) / math.sqrt(2 * math.pi * hp.mu_var)
        upper_mask = grid > c
        full = np.empty((J, sig.size, M))
        upper = np.empty((J, sig.size, M))
        scale = np.zeros(J)
        for j in range(J):
            if n[j] == 0:
                full[j] = 1.0
                upper[j] = special.ndtr((grid[None, :] - c) / sig[:, None])
                continue
            ll = y[j] * grid - n[j] * np.logaddexp(0.0, grid)
            scale[j] = ll.max()
            lik = np.exp(ll - scale[j])
            for dest, vec in ((full, lik), (upper, lik * upper_mask)):
                # the kernel is symmetric, so sum_k vec[k] ker[k - m] is a plain convolution
                spec = fft.rfft(vec, n=L)
                dest[j] = fft.irfft(kern * spec[None, :], n=L, axis=1)[:, :M]
            # likelihood beyond the lattice is ~1 on the open side when y = 0 or y = n
            lo_edge = grid[0] - 0.5 * h
            hi_edge = grid[-1] + 0.5 * h
            if y[j] == 0:
                full[j] += math.exp(-scale[j]) * special.ndtr((lo_edge - grid[None, :]) / sig[:, None])
            if y[j] == n[j]:
                tail = math.exp(-scale[j]) * special.ndtr((grid[None, :] - hi_edge) / sig[:, None])
                full[j] += tail
                upper[j] += tail
        np.maximum(full, 0.0, out=full)
        np.maximum(upper, 0.0, out=upper)
        base = wsig[:, None] * mu_w[None, :]
        prod_all = base * np.prod(full, axis=0)
        total = prod_all.sum()
        for j in range(J):
            others = base * np.prod(np.delete(full, j, axis=0), axis=0)
            probs[j, k] = float(np.sum(others * upper[j]) / total)
        if log_ev is None:
            log_ev = float(math.log(total) + scale.sum())
    probs = np.clip(probs, 0.0, 1.0)
    return PosteriorResult(
        thresholds=ts,
        probs=probs,
        log_evidence=log_ev,
        grid_diag={"lattice_step": h, "n_sigma_nodes": int(sig.size), "lattice_size": M},
    )
