"""Special functions, quadrature rules and scalar root finding.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "DomainError",
    "BracketError",
    "QuadratureRule",
    "ln_gamma",
    "beta_fn",
    "reg_inc_beta",
    "find_root",
    "golden_max",
    "gauss_legendre",
    "gauss_hermite",
    "trapezoid",
    "gaussian_window",
]

_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAXITER = 10_000


class DomainError(ValueError):
    """Argument outside the domain of a numerical routine."""


class BracketError(ValueError):
    """Root finder called on an interval without a sign change."""


def _require_positive(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise DomainError(f"{name} must be positive and finite, got {value!r}")
    return value


def ln_gamma(x: float) -> float:
    """Natural log of the gamma function for positive ``x``."""
    x = _require_positive("x", x)
    return math.lgamma(x)


def beta_fn(a: float, b: float) -> float:
    """Complete beta function B(a, b)."""
    a = _require_positive("a", a)
    b = _require_positive("b", b)
    return math.exp(math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))


def _beta_cf(x: float, a: float, b: float) -> float:
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function I(x; a, b).

    Uses the continued fraction directly when ``x < (a+1)/(a+b+2)`` and the
    reflection ``1 - I(1-x; b, a)`` otherwise, so the fraction is always
    evaluated where it converges quickly.
    """
    a = _require_positive("a", a)
    b = _require_positive("b", b)
    x = float(x)
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"x must lie in [0, 1], got {x!r}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(x, a, b) / a
    return 1.0 - front * _beta_cf(1.0 - x, b, a) / b


def find_root(
    f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-8, maxiter: int = 500
) -> float:
    """Bisection root of ``f`` on ``[lo, hi]``; stops when the bracket is narrower than ``tol``."""
    if not tol > 0:
        raise DomainError("tol must be positive")
    lo, hi = float(lo), float(hi)
    if lo > hi:
        lo, hi = hi, lo
    flo, fhi = f(lo), f(hi)
    if not (math.isfinite(flo) and math.isfinite(fhi)):
        raise DomainError("f must be finite at both bracket ends")
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if flo * fhi > 0.0:
        raise BracketError(f"no sign change on [{lo}, {hi}]: f={flo:.3g}, {fhi:.3g}")
    for _ in range(maxiter):
        if hi - lo <= tol:
            break
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm < 0.0) == (flo < 0.0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def golden_max(f: Callable[[float], float], lo: float, hi: float, tol: float = 1e-8) -> float:
    """Maximizer of a unimodal ``f`` on ``[lo, hi]`` by golden-section search."""
    a, b = float(lo), float(hi)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol * max(1.0, abs(a) + abs(b)):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


@dataclass(frozen=True)
class QuadratureRule:
    """Fixed nodes and positive weights; ``integrate`` returns sum(w * f(x))."""

    nodes: np.ndarray
    weights: np.ndarray
    kind: str

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if nodes.shape != weights.shape or nodes.ndim != 1:
            raise DomainError("nodes and weights must be 1-d arrays of equal length")
        if np.any(np.diff(nodes) <= 0):
            raise DomainError("nodes must be strictly increasing")
        if np.any(weights <= 0):
            raise DomainError("weights must be positive")
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)

    def __len__(self) -> int:
        return self.nodes.size

    def integrate(self, f: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


def gauss_legendre(n: int, lo: float, hi: float) -> QuadratureRule:
    """n-point Gauss-Legendre rule on ``[lo, hi]``."""
    if hi <= lo:
        raise DomainError("need lo < hi")
    x, w = np.polynomial.legendre.leggauss(int(n))
    half = 0.5 * (hi - lo)
    return QuadratureRule(0.5 * (hi + lo) + half * x, half * w, "gauss-legendre")


def gauss_hermite(n: int, mean: float = 0.0, sd: float = 1.0) -> QuadratureRule:
    """Rule whose weights integrate against the Normal(mean, sd^2) density."""
    sd = _require_positive("sd", sd)
    x, w = np.polynomial.hermite_e.hermegauss(int(n))
    return QuadratureRule(mean + sd * x, w / math.sqrt(2.0 * math.pi), "gauss-hermite")


def trapezoid(lo: float, hi: float, n: int) -> QuadratureRule:
    """Composite trapezoid rule with ``n`` equally spaced nodes."""
    if hi <= lo or n < 2:
        raise DomainError("need lo < hi and n >= 2")
    x = np.linspace(lo, hi, int(n))
    w = np.full(x.size, (hi - lo) / (n - 1))
    w[0] *= 0.5
    w[-1] *= 0.5
    return QuadratureRule(x, w, "trapezoid")


def gaussian_window(mean: float, sd: float, n: int = 64, half_width: float = 8.0) -> QuadratureRule:
    """Gauss-Legendre rule covering ``mean +/- half_width * sd``.

    Default for 1-d marginalizations against a roughly Gaussian factor.
    """
    sd = _require_positive("sd", sd)
    return gauss_legendre(n, mean - half_width * sd, mean + half_width * sd)
