"""Compiled inner loops of the posterior engine.

Per arm the conditional integrand over eta = mu + theta is

    f(eta) = exp(y*eta - n*log(1 + e^eta)) * Normal(eta; mu, sigma^2)

which is log-concave, so its mode is found by a guarded Newton iteration
and the drop of log f away from the mode bounds how far the integration
range has to reach.
"""

import math

import numpy as np
from numba import njit

_LOG_2PI = math.log(2.0 * math.pi)
_MAX_PIECES = 16


@njit(cache=True, nogil=True)
def softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, nogil=True)
def expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(cache=True, nogil=True)
def _log_f(y, n, mu, prec0, eta):
    d = eta - mu
    return y * eta - n * softplus(eta) - 0.5 * d * d * prec0


@njit(cache=True, nogil=True)
def conditional_mode(y, n, mu, prec0):
    """Mode of log f and the curvature -d2 log f there."""
    ph = (y + 0.5) / (n + 1.0)
    lp = (n + 1.0) * ph * (1.0 - ph)
    eta = (math.log(ph / (1.0 - ph)) * lp + mu * prec0) / (lp + prec0)
    h = prec0
    for _ in range(60):
        p = expit(eta)
        h = n * p * (1.0 - p) + prec0
        step = (y - n * p - (eta - mu) * prec0) / h
        lim = 3.0 / math.sqrt(h)
        if step > lim:
            step = lim
        elif step < -lim:
            step = -lim
        eta += step
        if abs(step) * math.sqrt(h) < 1e-10:
            break
    p = expit(eta)
    h = n * p * (1.0 - p) + prec0
    return eta, h


@njit(cache=True, nogil=True)
def laplace_terms(y, n, mu, sigma):
    """Laplace approximation to log L(mu, sigma) and its first two mu-derivatives."""
    prec0 = 1.0 / (sigma * sigma)
    J = y.size
    val = 0.0
    d1 = 0.0
    d2 = 0.0
    for j in range(J):
        eta, h = conditional_mode(y[j], n[j], mu, prec0)
        p = expit(eta)
        npq = n[j] * p * (1.0 - p)
        val += _log_f(y[j], n[j], mu, prec0, eta) + 0.5 * math.log(prec0 / h)
        d1 += y[j] - n[j] * p
        d2 -= npq * prec0 / (prec0 + npq)
    return val, d1, d2


@njit(cache=True, nogil=True)
def mu_profile(y, n, mu_mean, mu_var, sigmas, drop):
    """Conditional mode of mu for each sigma, plus a range reaching ``drop`` nats.

    Returns arrays (mode, sd, log_marginal, reach_lo, reach_hi); log_marginal is
    the Laplace estimate of log p(y, sigma) up to the prior on sigma.
    """
    K = sigmas.size
    mode = np.empty(K)
    sd = np.empty(K)
    logm = np.empty(K)
    rlo = np.empty(K)
    rhi = np.empty(K)
    # pooled starting point
    ys = 0.0
    ns = 0.0
    for j in range(y.size):
        ys += y[j]
        ns += n[j]
    ph = (ys + 0.5) / (ns + 1.0)
    m = math.log(ph / (1.0 - ph))
    cap = math.sqrt(2.0 * drop * mu_var)
    for k in range(K):
        s = sigmas[k]
        H = -1.0 / mu_var
        for _ in range(50):
            val, d1, d2 = laplace_terms(y, n, m, s)
            g = d1 - (m - mu_mean) / mu_var
            H = d2 - 1.0 / mu_var
            step = -g / H
            lim = 3.0 / math.sqrt(-H)
            if step > lim:
                step = lim
            elif step < -lim:
                step = -lim
            m += step
            if abs(step) * math.sqrt(-H) < 1e-9:
                break
        val, d1, d2 = laplace_terms(y, n, m, s)
        H = d2 - 1.0 / mu_var
        dm = m - mu_mean
        top = val - 0.5 * dm * dm / mu_var
        sdk = 1.0 / math.sqrt(-H)
        mode[k] = m
        sd[k] = sdk
        logm[k] = top + 0.5 * math.log(2.0 * math.pi * sdk * sdk) - 0.5 * math.log(2.0 * math.pi * mu_var)
        t = 6.0 * sdk
        for side in range(2):
            sgn = -1.0 if side == 0 else 1.0
            x = m + sgn * t
            v, _, _ = laplace_terms(y, n, x, s)
            dx = x - mu_mean
            dd = top - (v - 0.5 * dx * dx / mu_var)
            if dd >= drop:
                r = t
            else:
                r = t * drop / max(dd, 1e-3)
                r = min(r, max(cap, t))
            if side == 0:
                rlo[k] = r
            else:
                rhi[k] = r
    return mode, sd, logm, rlo, rhi


@njit(cache=True, nogil=True)
def _insert_sorted(buf, count, value):
    i = count
    while i > 0 and buf[i - 1] > value:
        buf[i] = buf[i - 1]
        i -= 1
    buf[i] = value
    return count + 1


@njit(cache=True, nogil=True)
def arm_integrals(y, n, mus, sigmas, cuts, unit_nodes, unit_weights, want_mean,
                  out_logL, out_frac, out_mean):
    """Exact per-arm integrals at every (mu, sigma) node.

    out_logL[i, j]    log of  int lik_j(eta) N(eta; mu_i, sigma_i^2) d eta
    out_frac[i, j, k] conditional probability that eta_j > cuts[k]
    out_mean[i, j]    conditional mean of expit(eta_j) (if want_mean)

    The range is split at the mode +/- 4 conditional sd, at points where
    the likelihood itself changes or has died out, and at every cut; each
    piece gets the same Gauss-Legendre rule.
    """
    P = mus.size
    J = y.size
    K = cuts.size
    Q = unit_nodes.size
    buf = np.empty(_MAX_PIECES + K)
    piece_w = np.empty(_MAX_PIECES + K)
    for j in range(J):
        yj = y[j]
        nj = n[j]
        # likelihood landmarks
        l0 = 0.0
        l3 = 0.0
        if nj <= 0.0:
            l1 = 0.0
            l2 = 0.0
            has_lik = False
        else:
            has_lik = True
            if yj <= 0.0:
                l1 = math.log(0.05 / nj)
                l2 = math.log(30.0 / nj)
            elif yj >= nj:
                l1 = -math.log(30.0 / nj)
                l2 = -math.log(0.05 / nj)
            else:
                ph = yj / nj
                c = math.log(ph / (1.0 - ph))
                w = 1.0 / math.sqrt(nj * ph * (1.0 - ph))
                l1 = c - 4.0 * w
                l2 = c + 4.0 * w
            # past these the likelihood has fallen by a further ~30 nats
            l0 = l1 - 30.0 / max(yj, 1.0)
            l3 = l2 + 30.0 / max(nj - yj, 1.0)
        for i in range(P):
            mu = mus[i]
            sigma = sigmas[i]
            prec0 = 1.0 / (sigma * sigma)
            eta, h = conditional_mode(yj, nj, mu, prec0)
            s = 1.0 / math.sqrt(h)
            f0 = _log_f(yj, nj, mu, prec0, eta)
            t = 4.0 * s
            cap = max(t, 9.0 * sigma)
            lo = eta
            hi = eta
            for side in range(2):
                sgn = -1.0 if side == 0 else 1.0
                d = f0 - _log_f(yj, nj, mu, prec0, eta + sgn * t)
                if d >= 30.0:
                    r = t
                else:
                    r = min(t * 30.0 / max(d, 1e-12), cap)
                if side == 0:
                    lo = eta - r
                else:
                    hi = eta + r
            cnt = 0
            cnt = _insert_sorted(buf, cnt, lo)
            cnt = _insert_sorted(buf, cnt, hi)
            cnt = _insert_sorted(buf, cnt, max(lo, eta - t))
            cnt = _insert_sorted(buf, cnt, min(hi, eta + t))
            if has_lik:
                cnt = _insert_sorted(buf, cnt, min(max(l1, lo), hi))
                cnt = _insert_sorted(buf, cnt, min(max(l2, lo), hi))
                if yj > 0.0:
                    cnt = _insert_sorted(buf, cnt, min(max(l0, lo), hi))
                if yj < nj:
                    cnt = _insert_sorted(buf, cnt, min(max(l3, lo), hi))
            for k in range(K):
                cnt = _insert_sorted(buf, cnt, min(max(cuts[k], lo), hi))
            full = 0.0
            mean = 0.0
            for q in range(cnt - 1):
                a = buf[q]
                wd = buf[q + 1] - a
                acc = 0.0
                if wd > 0.0:
                    for r in range(Q):
                        e = a + wd * unit_nodes[r]
                        v = unit_weights[r] * math.exp(_log_f(yj, nj, mu, prec0, e) - f0)
                        acc += v
                        if want_mean:
                            mean += v * wd * expit(e)
                    acc *= wd
                piece_w[q] = acc
                full += acc
            out_logL[i, j] = f0 + math.log(full) - math.log(sigma) - 0.5 * _LOG_2PI
            if want_mean:
                out_mean[i, j] = mean / full
            for k in range(K):
                cc = min(max(cuts[k], lo), hi)
                up = 0.0
                for q in range(cnt - 1):
                    if buf[q] >= cc:
                        up += piece_w[q]
                fr = up / full
                out_frac[i, j, k] = min(max(fr, 0.0), 1.0)


@njit(cache=True, nogil=True)
def mu_grid(y, n, cuts, sigmas, mode, sd, r_lo, r_hi, unit_nodes, unit_weights):
    """Gauss-Legendre nodes in mu for every sigma node.

    Base pieces split [mode - r_lo, mode + r_hi] at mode and mode +/- 3 sd.
    For small sigma the conditional tail probability of an arm jumps from 0
    to 1 as mu passes the point t where the conditional mode of eta equals
    a cut, over a width w of about sigma.  When that jump is sharper than
    the mu spread, t and t +/- 2w become breakpoints; jumps whose windows
    overlap are merged so that nearly equal arms do not multiply the work.

    Returns (mu, log_weight, sigma_index); weights exclude the prior on mu.
    """
    S = sigmas.size
    J = y.size
    K = cuts.size
    Q = unit_nodes.size
    nb = 5 + 3 * J * K
    edges = np.empty((S, nb))
    counts = np.empty(S, np.int64)
    tpos = np.empty(J * K)
    twid = np.empty(J * K)
    total = 0
    for s in range(S):
        sig = sigmas[s]
        lo = mode[s] - r_lo[s]
        hi = mode[s] + r_hi[s]
        row = edges[s]
        cnt = 0
        cnt = _insert_sorted(row, cnt, lo)
        cnt = _insert_sorted(row, cnt, hi)
        cnt = _insert_sorted(row, cnt, mode[s])
        cnt = _insert_sorted(row, cnt, max(lo, mode[s] - 3.0 * sd[s]))
        cnt = _insert_sorted(row, cnt, min(hi, mode[s] + 3.0 * sd[s]))
        m = 0
        for j in range(J):
            for k in range(K):
                p = expit(cuts[k])
                npq = n[j] * p * (1.0 - p)
                w = sig * math.sqrt(1.0 + npq * sig * sig)
                if w >= sd[s]:
                    continue
                t = cuts[k] - sig * sig * (y[j] - n[j] * p)
                if t + 2.0 * w <= lo or t - 2.0 * w >= hi:
                    continue
                # insertion sort by position
                i = m
                while i > 0 and tpos[i - 1] > t:
                    tpos[i] = tpos[i - 1]
                    twid[i] = twid[i - 1]
                    i -= 1
                tpos[i] = t
                twid[i] = w
                m += 1
        i = 0
        while i < m:
            a = tpos[i] - 2.0 * twid[i]
            b = tpos[i] + 2.0 * twid[i]
            c_lo = tpos[i]
            c_hi = tpos[i]
            i2 = i + 1
            while i2 < m and tpos[i2] - 2.0 * twid[i2] < b:
                b = max(b, tpos[i2] + 2.0 * twid[i2])
                c_hi = tpos[i2]
                i2 += 1
            cnt = _insert_sorted(row, cnt, min(max(a, lo), hi))
            cnt = _insert_sorted(row, cnt, min(max(0.5 * (c_lo + c_hi), lo), hi))
            cnt = _insert_sorted(row, cnt, min(max(b, lo), hi))
            i = i2
        # drop repeated edges
        keep = 1
        for q in range(1, cnt):
            if row[q] - row[keep - 1] > 1e-12 * (1.0 + abs(row[q])):
                row[keep] = row[q]
                keep += 1
        counts[s] = keep
        total += (keep - 1) * Q
    mus = np.empty(total)
    logw = np.empty(total)
    owner = np.empty(total, np.int64)
    i = 0
    for s in range(S):
        for q in range(counts[s] - 1):
            a = edges[s, q]
            wd = edges[s, q + 1] - a
            for r in range(Q):
                mus[i] = a + wd * unit_nodes[r]
                logw[i] = math.log(wd * unit_weights[r])
                owner[i] = s
                i += 1
    return mus, logw, owner


@njit(cache=True, nogil=True)
def _ndtr(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


@njit(cache=True, nogil=True)
def laplace_tails(y, n, cuts, sigmas, mode, sd):
    """Rough Pr(eta_j > cut) at each sigma, from Gaussian approximations.

    Only used to judge how fast the tail probabilities change with sigma.
    """
    S = sigmas.size
    J = y.size
    K = cuts.size
    out = np.empty((S, J, K))
    for s in range(S):
        prec0 = 1.0 / (sigmas[s] * sigmas[s])
        for j in range(J):
            eta, h = conditional_mode(y[j], n[j], mode[s], prec0)
            slope = prec0 / h
            v = 1.0 / h + slope * slope * sd[s] * sd[s]
            for k in range(K):
                out[s, j, k] = _ndtr((eta - cuts[k]) / math.sqrt(v))
    return out
