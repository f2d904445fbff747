"""Priors on the arm-level standard deviation and PC-prior scaling tools.

Four families are supported, all evaluated on the standard-deviation scale
so the inference engine works with a single parameterization:

* ``GammaOnPrecision`` -- Gamma(shape, rate) on tau = 1/sigma^2
* ``UniformOnSd``      -- Uniform(lower, upper) on sigma
* ``HalfT``            -- half-t(scale, dof) on sigma
* ``PC``               -- exponential(rate) on sigma (penalized complexity prior)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .numerics import DomainError, beta_fn, find_root, golden_max, reg_inc_beta

__all__ = [
    "RangeError",
    "DerivationError",
    "GammaOnPrecision",
    "UniformOnSd",
    "HalfT",
    "PC",
    "PriorSpec",
    "EpcDerivation",
    "SD_RULE_CONSTANT",
    "PRESET_NAMES",
    "log_density_sd",
    "halft_cdf",
    "halft_survival",
    "lambda_from_sd",
    "lambda_htd",
    "lambda0",
    "epc_from_halft",
    "implied_theta_density",
    "implied_or_density",
    "implied_or_mass",
    "kld_gauss",
    "pc_distance",
    "preset",
    "prior_from_config",
]

# lambda * sd for the rule of thumb: marginal sd of theta is ~0.31 z when Pr(sigma > z) = 0.01
SD_RULE_CONSTANT = -0.31 * math.log(0.01)

# default engine support on sigma; mass outside is lumped onto the end nodes
_SIGMA_LO = 1e-4
_SIGMA_HI = 1e3


class RangeError(ArithmeticError):
    """Result not representable in double precision."""


class DerivationError(RuntimeError):
    """The equivalent PC prior could not be derived."""


@dataclass(frozen=True)
class GammaOnPrecision:
    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise DomainError("Gamma shape and rate must be positive")

    def log_density(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        a, b = self.shape, self.rate
        log_tau = -2.0 * np.log(sigma)
        # Gamma density of tau plus log|d tau / d sigma| = log 2 - 3 log sigma
        return (a * math.log(b) - math.lgamma(a) + (a - 1.0) * log_tau - b * np.exp(log_tau)
                + math.log(2.0) - 3.0 * np.log(sigma))

    def cdf(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        # sigma <= s  <=>  tau >= s^-2
        return special.gammaincc(self.shape, self.rate / sigma**2)

    def support(self):
        return 1e-6, 1e4

    def describe(self):
        return {"family": "gamma", "shape": self.shape, "rate": self.rate}


@dataclass(frozen=True)
class UniformOnSd:
    lower: float
    upper: float

    def __post_init__(self):
        if not (self.lower >= 0 and self.upper > self.lower):
            raise DomainError("Uniform bounds need 0 <= lower < upper")

    def log_density(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        inside = (sigma >= self.lower) & (sigma <= self.upper)
        return np.where(inside, -math.log(self.upper - self.lower), -np.inf)

    def cdf(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        return np.clip((sigma - self.lower) / (self.upper - self.lower), 0.0, 1.0)

    def support(self):
        return max(self.lower, _SIGMA_LO), self.upper

    def describe(self):
        return {"family": "uniform", "lower": self.lower, "upper": self.upper}


@dataclass(frozen=True)
class HalfT:
    scale: float
    dof: float

    def __post_init__(self):
        if not (self.scale > 0 and self.dof > 0):
            raise DomainError("half-t scale and dof must be positive")

    def log_density(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        g, v = self.scale, self.dof
        log_norm = (math.log(2.0) + math.lgamma(0.5 * (v + 1)) - math.lgamma(0.5 * v)
                    - 0.5 * math.log(v * math.pi) - math.log(g))
        return log_norm - 0.5 * (v + 1) * np.log1p((sigma / g) ** 2 / v)

    def cdf(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        g2v = self.scale**2 * self.dof
        return special.betainc(0.5, 0.5 * self.dof, sigma**2 / (sigma**2 + g2v))

    def support(self):
        return _SIGMA_LO, _SIGMA_HI

    def describe(self):
        return {"family": "half-t", "scale": self.scale, "dof": self.dof}


@dataclass(frozen=True)
class PC:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise DomainError("PC rate must be positive")

    def log_density(self, sigma):
        sigma = np.asarray(sigma, dtype=float)
        return math.log(self.rate) - self.rate * sigma

    def cdf(self, sigma):
        return -np.expm1(-self.rate * np.asarray(sigma, dtype=float))

    def support(self):
        return _SIGMA_LO, _SIGMA_HI

    def describe(self):
        return {"family": "pc", "rate": self.rate}


PriorSpec = Union[GammaOnPrecision, UniformOnSd, HalfT, PC]


def log_density_sd(prior: PriorSpec, sigma: float) -> float:
    """Log density of ``prior`` at standard deviation ``sigma``."""
    sigma = float(sigma)
    if not sigma > 0:
        raise DomainError(f"sigma must be positive, got {sigma!r}")
    return float(prior.log_density(sigma))


def _check_ht(gamma, nu):
    if not (gamma > 0 and nu > 0):
        raise DomainError("half-t scale and dof must be positive")


def halft_cdf(gamma: float, nu: float, x: float) -> float:
    """CDF of |T| where T is a centred Student-t with scale ``gamma`` and ``nu`` dof."""
    _check_ht(gamma, nu)
    if x < 0:
        raise DomainError("x must be non-negative")
    if x == 0:
        return 0.0
    if math.isinf(x):
        return 1.0
    x2 = x * x
    return reg_inc_beta(x2 / (x2 + gamma * gamma * nu), 0.5, 0.5 * nu)


def halft_survival(gamma: float, nu: float, x: float) -> float:
    """1 - halft_cdf, evaluated without cancellation for large ``x``."""
    _check_ht(gamma, nu)
    if x < 0:
        raise DomainError("x must be non-negative")
    if x == 0:
        return 1.0
    x2 = x * x
    g2v = gamma * gamma * nu
    if x2 < g2v:
        # small x: the reflected argument rounds towards 1, so complement the cdf
        return 1.0 - reg_inc_beta(x2 / (x2 + g2v), 0.5, 0.5 * nu)
    return reg_inc_beta(g2v / (x2 + g2v), 0.5 * nu, 0.5)


def lambda_from_sd(sd: float) -> float:
    """PC rate whose implied marginal sd of the arm effects is ``sd``."""
    if not sd > 0:
        raise DomainError("sd must be positive")
    return SD_RULE_CONSTANT / sd


def lambda_htd(gamma: float, nu: float, x: float) -> float:
    """Rate of the exponential that puts the half-t(gamma, nu) mass on [x, inf)."""
    _check_ht(gamma, nu)
    if not x > 0:
        raise DomainError("x must be positive")
    x2 = x * x
    lower = reg_inc_beta(x2 / (x2 + gamma * gamma * nu), 0.5, 0.5 * nu)
    if lower < 0.5:
        log_surv = math.log1p(-lower)
    else:
        surv = halft_survival(gamma, nu, x)
        if surv <= 0.0:
            raise RangeError(f"half-t survival underflows at x={x}")
        log_surv = math.log(surv)
    return -log_surv / x


def lambda0(gamma: float, nu: float) -> float:
    """Small-x limit of ``lambda_htd``: 2 / (gamma sqrt(nu) B(1/2, nu/2))."""
    _check_ht(gamma, nu)
    return 2.0 / (gamma * math.sqrt(nu) * beta_fn(0.5, 0.5 * nu))


@dataclass(frozen=True)
class EpcDerivation:
    gamma: float
    nu: float
    lambda0: float
    x_star: float
    x_peak: float
    lam: float

    def prior(self) -> PC:
        return PC(self.lam)


def epc_from_halft(gamma: float, nu: float, tol: float = 1e-10) -> EpcDerivation:
    """Equivalent PC prior of a half-t(gamma, nu).

    Finds the peak of x -> lambda_htd(gamma, nu, x), then the point x* past
    the peak where the curve falls back to its x -> 0 limit.  [x*, inf) is
    the largest tail interval on which the matching rate stays below that
    limit; the returned rate is the limit itself.
    """
    lam0 = lambda0(gamma, nu)
    log_peak = golden_max(lambda u: lambda_htd(gamma, nu, math.exp(u)),
                          math.log(1e-6 * gamma), math.log(1e3 * gamma), tol=1e-12)
    x_peak = math.exp(log_peak)
    hi = 1e6 * gamma
    try:
        x_star = find_root(lambda x: lambda_htd(gamma, nu, x) - lam0, x_peak, hi, tol=tol * gamma)
    except (ValueError, RangeError) as exc:
        raise DerivationError(f"cannot bracket the reference tail interval for half-t({gamma}, {nu})") from exc
    return EpcDerivation(gamma=gamma, nu=nu, lambda0=lam0, x_star=x_star, x_peak=x_peak, lam=lam0)


def _sigma_rule(lam: float, tail: float = 1e-10, step: float = 0.02):
    # trapezoid on u = log(sigma) up to the (1 - tail) quantile of Exp(lam)
    sigma_max = -math.log(tail) / lam
    u = np.arange(math.log(sigma_max), math.log(sigma_max) - 60.0, -step)[::-1]
    return u, sigma_max


def implied_theta_density(lam: float, theta) -> np.ndarray:
    """Marginal prior of an arm effect theta after integrating sigma ~ Exp(lam).

    The integral over sigma is done in log(sigma), where the integrand
    phi(theta/sigma) * lam * exp(-lam sigma) decays doubly exponentially at
    both ends, so the trapezoid rule converges geometrically.
    """
    if not lam > 0:
        raise DomainError("lambda must be positive")
    theta = np.atleast_1d(np.abs(np.asarray(theta, dtype=float)))
    u, _ = _sigma_rule(lam)
    sig = np.exp(u)
    h = u[1] - u[0]
    z = theta[:, None] / sig[None, :]
    vals = np.exp(-0.5 * z * z - lam * sig[None, :]) * lam / math.sqrt(2.0 * math.pi)
    vals[:, 0] *= 0.5
    vals[:, -1] *= 0.5
    out = vals.sum(axis=1) * h
    out[theta == 0] = np.inf
    return out


def implied_or_density(lam: float, r) -> np.ndarray:
    """Prior density of the odds ratio exp(theta) implied by a PC(lam) prior on sigma."""
    r_arr = np.atleast_1d(np.asarray(r, dtype=float))
    if np.any(r_arr <= 0):
        raise DomainError("odds ratios must be positive")
    return implied_theta_density(lam, np.log(r_arr)) / r_arr


def implied_or_mass(lam: float, lo: float, hi: float) -> float:
    """Prior probability that the odds ratio exp(theta) lies in (lo, hi)."""
    if not (0 < lo < hi):
        raise DomainError("need 0 < lo < hi")
    u, _ = _sigma_rule(lam)
    sig = np.exp(u)
    inner = special.ndtr(math.log(hi) / sig) - special.ndtr(math.log(lo) / sig)
    # density of log(sigma) is lam * sigma * exp(-lam sigma)
    mass = np.trapezoid(inner * lam * sig * np.exp(-lam * sig), u)
    # sigma below the grid behaves like the base model: odds ratio 1
    below = -math.expm1(-lam * sig[0])
    return float(mass + (below if lo < 1.0 < hi else 0.0))


def kld_gauss(sigma: float, sigma0: float, J: int) -> float:
    """KL divergence between N(0, sigma^2 I_J) and N(0, sigma0^2 I_J)."""
    if not (sigma > 0 and sigma0 > 0):
        raise DomainError("standard deviations must be positive")
    if int(J) < 1:
        raise DomainError("J must be a positive integer")
    ratio = (sigma / sigma0) ** 2
    return 0.5 * J * (ratio - 1.0 - math.log(ratio))


def pc_distance(sigma: float, sigma0: float, J: int) -> float:
    """Distance from the base model, (sigma / sigma0) sqrt(J), valid for sigma0 << sigma."""
    if not (sigma > 0 and sigma0 > 0):
        raise DomainError("standard deviations must be positive")
    if int(J) < 1:
        raise DomainError("J must be a positive integer")
    return sigma / sigma0 * math.sqrt(J)


BERRY_GAMMA = GammaOnPrecision(0.0005, 0.000005)
DEFAULT_HALFT = HalfT(10.0, 1.0)

PRESET_NAMES = ("G", "U", "HT", "PC1", "PC5", "PC10", "EPC")


def preset(name: str) -> PriorSpec:
    """Named priors of the standard simulation study."""
    key = name.upper()
    if key == "G":
        return BERRY_GAMMA
    if key == "U":
        return UniformOnSd(0.0, 100.0)
    if key == "HT":
        return DEFAULT_HALFT
    if key in ("PC1", "PC5", "PC10"):
        return PC(lambda_from_sd(float(key[2:])))
    if key == "EPC":
        return PC(lambda0(DEFAULT_HALFT.scale, DEFAULT_HALFT.dof))
    raise KeyError(f"unknown prior preset {name!r}; expected one of {', '.join(PRESET_NAMES)}")


def prior_from_config(name: str, parameters=None) -> PriorSpec:
    """Resolve a prior from a preset name or a family name plus parameters.

    Family names follow the simulation interface: ``"PC"`` takes the sd
    guess (rate from the rule of thumb), ``"PC-rate"`` the rate directly,
    ``"half-t"`` (scale, dof), ``"gamma"`` (shape, rate) and ``"uniform"``
    (lower, upper).  ``"EPC"`` optionally takes (scale, dof) of the half-t.
    """
    params = [] if parameters is None else [float(p) for p in np.atleast_1d(parameters)]
    key = name.strip().lower()
    try:
        if key == "epc" and params:
            return epc_from_halft(*params).prior()
        if not params:
            return preset(name)
        if key == "pc":
            (sd,) = params
            return PC(lambda_from_sd(sd))
        if key == "pc-rate":
            (rate,) = params
            return PC(rate)
        if key in ("half-t", "ht", "halft"):
            return HalfT(*params)
        if key in ("gamma", "g"):
            return GammaOnPrecision(*params)
        if key in ("uniform", "u"):
            return UniformOnSd(*params)
    except TypeError as exc:
        raise DomainError(f"wrong number of parameters for prior {name!r}: {params}") from exc
    raise KeyError(f"unknown prior {name!r}")
