"""Compiled inner loops: batched information matrices and the MCMC chain.

The 4x4 information matrices are factored with an unrolled Cholesky; a
pivot falling below ``SINGULAR_RTOL`` times its original diagonal entry
marks the matrix singular (log-determinant -inf).
"""

import math

import numba as nb
import numpy as np

SINGULAR_RTOL = 1e-12
NEG_INF = -np.inf
P = 4


@nb.njit(cache=True)
def _chol4(M, L):
    """In-place lower Cholesky of a 4x4 SPD matrix. Returns log det or -inf."""
    logdet = 0.0
    for j in range(P):
        s = M[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not (s > SINGULAR_RTOL * M[j, j]) or not (s > 0.0):
            return NEG_INF
        d = math.sqrt(s)
        L[j, j] = d
        logdet += 2.0 * math.log(d)
        for i in range(j + 1, P):
            t = M[i, j]
            for k in range(j):
                t -= L[i, k] * L[j, k]
            L[i, j] = t / d
        for i in range(j):
            L[i, j] = 0.0
    return logdet


@nb.njit(cache=True)
def _quad_inv(L, g):
    """g^T M^{-1} g given the Cholesky factor L of M."""
    y0 = g[0] / L[0, 0]
    y1 = (g[1] - L[1, 0] * y0) / L[1, 1]
    y2 = (g[2] - L[2, 0] * y0 - L[2, 1] * y1) / L[2, 2]
    y3 = (g[3] - L[3, 0] * y0 - L[3, 1] * y1 - L[3, 2] * y2) / L[3, 3]
    return y0 * y0 + y1 * y1 + y2 * y2 + y3 * y3


@nb.njit(cache=True)
def _assemble(G, t, w, M):
    for a in range(P):
        for b in range(a + 1):
            M[a, b] = 0.0
    for i in range(G.shape[1]):
        wi = w[i]
        if wi == 0.0:
            continue
        for a in range(P):
            ga = wi * G[t, i, a]
            for b in range(a + 1):
                M[a, b] += ga * G[t, i, b]
    for a in range(P):
        for b in range(a):
            M[b, a] = M[a, b]


@nb.njit(cache=True)
def criterion_and_variance(G, alpha, w, dbar):
    """Weighted mean log det over atoms; fills ``dbar`` with the mean
    standardized variance per dose. Returns -inf (dbar left as nan) if any
    positively weighted atom has singular information."""
    T, q = G.shape[0], G.shape[1]
    M = np.empty((P, P))
    L = np.empty((P, P))
    for i in range(q):
        dbar[i] = 0.0
    crit = 0.0
    for t in range(T):
        a = alpha[t]
        if a == 0.0:
            continue
        _assemble(G, t, w, M)
        ld = _chol4(M, L)
        if ld == NEG_INF:
            for i in range(q):
                dbar[i] = np.nan
            return NEG_INF
        crit += a * ld
        for i in range(q):
            dbar[i] += a * _quad_inv(L, G[t, i])
    return crit


@nb.njit(cache=True)
def criterion_only(G, alpha, w):
    M = np.empty((P, P))
    L = np.empty((P, P))
    crit = 0.0
    for t in range(G.shape[0]):
        a = alpha[t]
        if a == 0.0:
            continue
        _assemble(G, t, w, M)
        ld = _chol4(M, L)
        if ld == NEG_INF:
            return NEG_INF
        crit += a * ld
    return crit


@nb.njit(cache=True)
def _variance_pass(G, alpha, w, dbar):
    """dbar only (no logarithms); False if some weighted atom is singular."""
    q = G.shape[1]
    for i in range(q):
        dbar[i] = 0.0
    for t in range(G.shape[0]):
        a = alpha[t]
        if a == 0.0:
            continue
        m00 = m10 = m11 = m20 = m21 = m22 = m30 = m31 = m32 = m33 = 0.0
        for i in range(q):
            wi = w[i]
            if wi == 0.0:
                continue
            g0 = G[t, i, 0]
            g1 = G[t, i, 1]
            g2 = G[t, i, 2]
            g3 = G[t, i, 3]
            w0 = wi * g0
            w1 = wi * g1
            w2 = wi * g2
            w3 = wi * g3
            m00 += w0 * g0
            m10 += w1 * g0
            m11 += w1 * g1
            m20 += w2 * g0
            m21 += w2 * g1
            m22 += w2 * g2
            m30 += w3 * g0
            m31 += w3 * g1
            m32 += w3 * g2
            m33 += w3 * g3
        # unrolled Cholesky with reciprocal pivots
        s = m00
        if not (s > 0.0):
            return False
        l00 = math.sqrt(s)
        r0 = 1.0 / l00
        l10 = m10 * r0
        l20 = m20 * r0
        l30 = m30 * r0
        s = m11 - l10 * l10
        if not (s > SINGULAR_RTOL * m11) or not (s > 0.0):
            return False
        l11 = math.sqrt(s)
        r1 = 1.0 / l11
        l21 = (m21 - l20 * l10) * r1
        l31 = (m31 - l30 * l10) * r1
        s = m22 - l20 * l20 - l21 * l21
        if not (s > SINGULAR_RTOL * m22) or not (s > 0.0):
            return False
        l22 = math.sqrt(s)
        r2 = 1.0 / l22
        l32 = (m32 - l30 * l20 - l31 * l21) * r2
        s = m33 - l30 * l30 - l31 * l31 - l32 * l32
        if not (s > SINGULAR_RTOL * m33) or not (s > 0.0):
            return False
        r3 = 1.0 / math.sqrt(s)
        for i in range(q):
            y0 = G[t, i, 0] * r0
            y1 = (G[t, i, 1] - l10 * y0) * r1
            y2 = (G[t, i, 2] - l20 * y0 - l21 * y1) * r2
            y3 = (G[t, i, 3] - l30 * y0 - l31 * y1 - l32 * y2) * r3
            dbar[i] += a * (y0 * y0 + y1 * y1 + y2 * y2 + y3 * y3)
    return True


@nb.njit(cache=True)
def multiplicative(G, alpha, w0, tol, max_iter, hist_f, hist_w):
    """Fixed-point iteration w_i <- w_i * dbar_i / 4.

    Stops as soon as max_i dbar_i <= 4 (1 + tol). The first
    ``hist_f.size`` criterion values and weight vectors are recorded.
    Returns (weights, max dbar, criterion, iterations, converged).
    """
    q = G.shape[1]
    w = w0.copy()
    dbar = np.empty(q)
    n_rec = hist_f.shape[0]
    bound = P * (1.0 + tol)
    it = 0
    while True:
        if it < n_rec:
            hist_f[it] = criterion_only(G, alpha, w)
            for i in range(q):
                hist_w[it, i] = w[i]
        if not _variance_pass(G, alpha, w, dbar):
            return w, np.inf, NEG_INF, it, False
        dmax = 0.0
        for i in range(q):
            if dbar[i] > dmax:
                dmax = dbar[i]
        if dmax <= bound:
            return w, dmax, criterion_only(G, alpha, w), it, True
        if it >= max_iter:
            return w, dmax, criterion_only(G, alpha, w), it, False
        s = 0.0
        for i in range(q):
            w[i] = w[i] * dbar[i] / P
            s += w[i]
        # sum_i w_i dbar_i = 4 exactly in exact arithmetic; remove drift
        for i in range(q):
            w[i] /= s
        it += 1


# ---------------------------------------------------------------------------
# posterior density in the unconstrained parametrization
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _softplus(z):
    if z > 0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


@nb.njit(cache=True)
def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@nb.njit(cache=True)
def to_natural(z, lo, hi, theta):
    """Unconstrained z (5,) -> (theta1..theta4, sigma). Returns log|Jacobian|."""
    logj = 0.0
    for j in range(4):
        s = _sigmoid(z[j])
        logs = -_softplus(-z[j]) - _softplus(z[j])
        if j == 2:
            llo = math.log(lo[j])
            lhi = math.log(hi[j])
            v = math.exp(llo + (lhi - llo) * s)
            if v < lo[j]:
                v = lo[j]
            elif v > hi[j]:
                v = hi[j]
            theta[j] = v
            logj += math.log(v) + math.log(lhi - llo) + logs
        else:
            v = lo[j] + (hi[j] - lo[j]) * s
            if v < lo[j]:
                v = lo[j]
            elif v > hi[j]:
                v = hi[j]
            theta[j] = v
            logj += math.log(hi[j] - lo[j]) + logs
    theta[4] = math.exp(z[4])
    logj += z[4]
    return logj


@nb.njit(cache=True)
def _grad_row(theta, x, g):
    g[0] = 1.0
    if x <= 0.0:
        g[1] = 0.0
        g[2] = 0.0
        g[3] = 0.0
        return
    lr = math.log(x) - math.log(theta[2])
    zz = theta[3] * lr
    s = _sigmoid(zz)
    c = _sigmoid(-zz)
    g[1] = s
    g[2] = -theta[1] * theta[3] / theta[2] * s * c
    g[3] = theta[1] * lr * s * c


@nb.njit(cache=True)
def _mean(theta, x):
    if x <= 0.0:
        return theta[0]
    return theta[0] + theta[1] * _sigmoid(theta[3] * (math.log(x) - math.log(theta[2])))


@nb.njit(cache=True)
def log_prior_theta(theta, grid):
    """Half log det of the equal-weight information on ``grid``."""
    q = grid.shape[0]
    M = np.zeros((P, P))
    L = np.empty((P, P))
    g = np.empty(P)
    for i in range(q):
        _grad_row(theta, grid[i], g)
        for a in range(P):
            for b in range(a + 1):
                M[a, b] += g[a] * g[b] / q
    for a in range(P):
        for b in range(a):
            M[b, a] = M[a, b]
    ld = _chol4(M, L)
    if ld == NEG_INF:
        return NEG_INF
    return 0.5 * ld


@nb.njit(cache=True)
def log_posterior_natural(theta, udoses, n, s1, s2, grid, lo, hi, slo, shi):
    """log likelihood + log functional-uniform prior + log(1/sigma), natural scale."""
    for j in range(4):
        if theta[j] < lo[j] or theta[j] > hi[j]:
            return NEG_INF
    sigma = theta[4]
    if sigma < slo or sigma > shi:
        return NEG_INF
    lp = log_prior_theta(theta, grid)
    if lp == NEG_INF:
        return NEG_INF
    rss = 0.0
    ntot = 0.0
    for d in range(udoses.shape[0]):
        mu = _mean(theta, udoses[d])
        rss += s2[d] - 2.0 * mu * s1[d] + n[d] * mu * mu
        ntot += n[d]
    if rss < 0.0:
        rss = 0.0
    loglik = -ntot * math.log(sigma) - 0.5 * ntot * math.log(2.0 * math.pi) - 0.5 * rss / (sigma * sigma)
    return loglik + lp - math.log(sigma)


@nb.njit(cache=True)
def log_target(z, udoses, n, s1, s2, grid, lo, hi, slo, shi):
    theta = np.empty(5)
    logj = to_natural(z, lo, hi, theta)
    lp = log_posterior_natural(theta, udoses, n, s1, s2, grid, lo, hi, slo, shi)
    if lp == NEG_INF:
        return NEG_INF
    return lp + logj


@nb.njit(cache=True)
def rwm_chunk(z, logp, chol, scale, eps, logu, udoses, n, s1, s2, grid, lo, hi, slo, shi, out):
    """Run ``eps.shape[0]`` random-walk Metropolis steps; writes states to ``out``.

    Returns (final z, final log target, accepted count).
    """
    d = z.shape[0]
    cur = z.copy()
    prop = np.empty(d)
    acc = 0
    for it in range(eps.shape[0]):
        for a in range(d):
            s = 0.0
            for b in range(a + 1):
                s += chol[a, b] * eps[it, b]
            prop[a] = cur[a] + scale * s
        lq = log_target(prop, udoses, n, s1, s2, grid, lo, hi, slo, shi)
        if lq != NEG_INF and logu[it] < lq - logp:
            for a in range(d):
                cur[a] = prop[a]
            logp = lq
            acc += 1
        for a in range(d):
            out[it, a] = cur[a]
    return cur, logp, acc


@nb.njit(cache=True)
def batch_to_natural(Z, lo, hi):
    out = np.empty_like(Z)
    row = np.empty(Z.shape[1])
    for t in range(Z.shape[0]):
        to_natural(Z[t], lo, hi, row)
        for a in range(Z.shape[1]):
            out[t, a] = row[a]
    return out


# ---------------------------------------------------------------------------
# weighted Lloyd iterations
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _assign(X, C, labels, dist):
    n, dim = X.shape
    k = C.shape[0]
    changed = 0
    for t in range(n):
        best = np.inf
        bj = 0
        for j in range(k):
            s = 0.0
            for a in range(dim):
                e = X[t, a] - C[j, a]
                s += e * e
            if s < best:
                best = s
                bj = j
        if labels[t] != bj:
            changed += 1
            labels[t] = bj
        dist[t] = best
    return changed


@nb.njit(cache=True)
def lloyd(X, wts, C0, max_iter):
    """Weighted Lloyd iterations from centers C0. Returns (centers, labels, sse)."""
    n, dim = X.shape
    k = C0.shape[0]
    C = C0.copy()
    labels = np.full(n, -1, dtype=np.int64)
    dist = np.empty(n)
    for _ in range(max_iter):
        if _assign(X, C, labels, dist) == 0:
            break
        mass = np.zeros(k)
        sums = np.zeros((k, dim))
        for t in range(n):
            j = labels[t]
            mass[j] += wts[t]
            for a in range(dim):
                sums[j, a] += wts[t] * X[t, a]
        for j in range(k):
            if mass[j] > 0.0:
                for a in range(dim):
                    C[j, a] = sums[j, a] / mass[j]
            else:
                # reseed an empty cluster at the point worst served by its center
                far = np.argmax(dist)
                for a in range(dim):
                    C[j, a] = X[far, a]
                dist[far] = 0.0
    _assign(X, C, labels, dist)
    sse = 0.0
    for t in range(n):
        sse += wts[t] * dist[t]
    return C, labels, sse
