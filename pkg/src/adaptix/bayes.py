"""Interim inference for the sigmoid Emax model.

Bounded least-squares fitting, the functional uniform prior, an adaptive
random-walk Metropolis sampler for (theta, sigma) and the k-means
compression of its output into a handful of weighted atoms.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize

from . import _kernels
from .design import ClusteredPosterior, bayes_criterion, log_det_criterion, optimize_weights
from .model import (
    DEFAULT_BOUNDS,
    N_PARAMS,
    Design,
    DoseGrid,
    ParameterBounds,
    Profile,
    ThetaSigEmax,
    TrialData,
)


class ChainFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# maximum likelihood (nonlinear least squares)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MLFit:
    theta_hat: ThetaSigEmax
    rss: float
    converged: bool
    at_bound: tuple[bool, bool, bool, bool]
    degenerate: bool = False


def _fractions(udoses, theta3, theta4):
    """Hill fractions, shape (..., n_doses), for broadcastable theta3/theta4."""
    x = np.asarray(udoses, dtype=float)
    pos = x > 0
    z = np.asarray(theta4)[..., None] * (np.log(np.where(pos, x, 1.0)) - np.log(np.asarray(theta3))[..., None])
    with np.errstate(over="ignore"):
        return np.where(pos, 1.0 / (1.0 + np.exp(-z)), 0.0)


def _profile_linear(f, n, s1, s2, lo, hi):
    """Box-constrained least squares in (theta1, theta2) given Hill fractions f.

    f has shape (m, D); returns theta1, theta2, rss, each shape (m,).
    """
    a00 = n.sum()
    a01 = f @ n
    a11 = (f * f) @ n
    b0 = s1.sum()
    b1 = f @ s1
    c = s2.sum()

    def rss(t1, t2):
        return c - 2.0 * (t1 * b0 + t2 * b1) + a00 * t1 * t1 + 2.0 * a01 * t1 * t2 + a11 * t2 * t2

    det = a00 * a11 - a01 * a01
    ok = det > 1e-12 * np.maximum(a00 * a11, 1e-300)
    safe = np.where(ok, det, 1.0)
    t1u = np.where(ok, (a11 * b0 - a01 * b1) / safe, 0.0)
    t2u = np.where(ok, (a00 * b1 - a01 * b0) / safe, 0.0)
    inside = ok & (t1u >= lo[0]) & (t1u <= hi[0]) & (t2u >= lo[1]) & (t2u <= hi[1])

    cands_t1 = [np.where(inside, t1u, np.nan)]
    cands_t2 = [np.where(inside, t2u, np.nan)]
    a11s = np.where(a11 > 0, a11, 1.0)
    for t1_edge in (lo[0], hi[0]):
        t2 = np.where(a11 > 0, np.clip((b1 - a01 * t1_edge) / a11s, lo[1], hi[1]), 0.0)
        cands_t1.append(np.full_like(t2, t1_edge))
        cands_t2.append(t2)
    for t2_edge in (lo[1], hi[1]):
        t1 = np.clip((b0 - a01 * t2_edge) / a00, lo[0], hi[0])
        cands_t1.append(t1)
        cands_t2.append(np.full_like(t1, t2_edge))
    T1 = np.stack(cands_t1)
    T2 = np.stack(cands_t2)
    R = np.where(np.isnan(T1), np.inf, rss(np.nan_to_num(T1), np.nan_to_num(T2)))
    j = np.argmin(R, axis=0)
    idx = np.arange(T1.shape[1])
    return T1[j, idx], T2[j, idx], np.maximum(R[j, idx], 0.0)


def ml_fit(
    data: TrialData,
    bounds: ParameterBounds = DEFAULT_BOUNDS,
    n_ed50: int = 50,
    n_hill: int = 30,
) -> MLFit:
    """Least-squares fit of the sigmoid Emax model within ``bounds``.

    The linear pair (theta1, theta2) is profiled out exactly.  The best
    (ED50, Hill) point of a log x linear grid is refined by Nelder-Mead on
    (log ED50, Hill).
    """
    u, n, s1, s2 = data.sufficient_stats()
    lo, hi = bounds.lower, bounds.upper
    if u.size < 2:
        ybar = float(s1.sum() / n.sum()) if n.sum() > 0 else 0.0
        t1 = float(np.clip(ybar, lo[0], hi[0]))
        rss = float(max(s2.sum() - 2 * t1 * s1.sum() + n.sum() * t1 * t1, 0.0))
        return MLFit(ThetaSigEmax(t1, 0.0, hi[2], lo[3]), rss, False, (False, False, True, True), True)

    ed50 = np.geomspace(lo[2], hi[2], n_ed50)
    hill = np.linspace(lo[3], hi[3], n_hill)
    E, H = np.meshgrid(ed50, hill, indexing="ij")
    f = _fractions(u, E.ravel(), H.ravel())
    _, _, rss = _profile_linear(f, n, s1, s2, lo, hi)
    best = int(np.argmin(rss))

    log_lo, log_hi = math.log(lo[2]), math.log(hi[2])

    def objective(v):
        e = math.exp(min(max(v[0], log_lo), log_hi))
        h = min(max(v[1], lo[3]), hi[3])
        return float(_profile_linear(_fractions(u, np.array([e]), np.array([h])), n, s1, s2, lo, hi)[2][0])

    x0 = np.array([math.log(E.ravel()[best]), H.ravel()[best]])
    res = minimize(
        objective,
        x0,
        method="Nelder-Mead",
        bounds=[(log_lo, log_hi), (lo[3], hi[3])],
        options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 4000, "maxfev": 8000},
    )
    v = res.x if res.fun <= rss[best] else x0
    e = float(np.clip(math.exp(v[0]), lo[2], hi[2]))
    h = float(np.clip(v[1], lo[3], hi[3]))
    t1, t2, r = _profile_linear(_fractions(u, np.array([e]), np.array([h])), n, s1, s2, lo, hi)
    theta = np.array([t1[0], t2[0], e, h])
    span = hi - lo
    at_bound = tuple(bool(min(theta[j] - lo[j], hi[j] - theta[j]) <= 1e-6 * span[j]) for j in range(N_PARAMS))
    return MLFit(ThetaSigEmax.from_array(theta), float(r[0]), bool(res.success), at_bound)


def pseudo_true_params(profile: Profile, grid: DoseGrid, bounds: ParameterBounds = DEFAULT_BOUNDS) -> ThetaSigEmax:
    """Closest sigmoid Emax curve (least squares on ``grid``) to a profile's mean."""
    if profile.in_family:
        return profile.true_theta
    x = grid.array
    return ml_fit(TrialData(x, profile.mean(x)), bounds).theta_hat


# ---------------------------------------------------------------------------
# prior and posterior density
# ---------------------------------------------------------------------------


def functional_uniform_logprior(theta, grid: DoseGrid, bounds: ParameterBounds = DEFAULT_BOUNDS) -> float:
    """Unnormalized log density: half log det of the equal-weight information on ``grid``."""
    if not bounds.contains(theta):
        return -math.inf
    return 0.5 * log_det_criterion(Design.uniform(grid), theta)


def log_posterior(
    theta,
    sigma: float,
    data: TrialData,
    grid: DoseGrid,
    bounds: ParameterBounds = DEFAULT_BOUNDS,
) -> float:
    """Gaussian log likelihood + functional uniform log prior + log(1/sigma)."""
    u, n, s1, s2 = data.sufficient_stats()
    th = np.append(np.asarray(theta, dtype=float), sigma)
    return float(
        _kernels.log_posterior_natural(
            th, u, n, s1, s2, grid.array, bounds.lower, bounds.upper, bounds.sigma[0], bounds.sigma[1]
        )
    )


# ---------------------------------------------------------------------------
# adaptive random-walk Metropolis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MCMCConfig:
    burn_in: int = 10_000
    n_draws: int = 10_000
    adapt_batch: int = 100
    target_accept: float = 0.3
    min_accept: float = 0.01


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    """Retained draws: columns theta1..theta4, sigma."""

    draws: NDArray[np.float64]
    acceptance_rate: float = float("nan")

    def __post_init__(self):
        d = np.array(self.draws, dtype=float)
        if d.ndim != 2 or d.shape[1] != N_PARAMS + 1:
            raise ValueError("draws must be a (T, 5) array")
        d.setflags(write=False)
        object.__setattr__(self, "draws", d)

    @property
    def theta(self) -> NDArray[np.float64]:
        return self.draws[:, :N_PARAMS]

    @property
    def sigma(self) -> NDArray[np.float64]:
        return self.draws[:, N_PARAMS]

    def __len__(self) -> int:
        return self.draws.shape[0]

    def as_clustered(self) -> ClusteredPosterior:
        """Every draw as an atom of weight 1/T (the plain Monte Carlo criterion)."""
        return ClusteredPosterior.equal_weights(self.theta)


def _to_unconstrained(theta_sigma, bounds: ParameterBounds):
    lo, hi = bounds.lower, bounds.upper
    z = np.empty(N_PARAMS + 1)
    for j in range(N_PARAMS):
        if j == 2:
            s = (math.log(theta_sigma[j]) - math.log(lo[j])) / (math.log(hi[j]) - math.log(lo[j]))
        else:
            s = (theta_sigma[j] - lo[j]) / (hi[j] - lo[j])
        s = min(max(s, 0.01), 0.99)
        z[j] = math.log(s / (1.0 - s))
    z[N_PARAMS] = math.log(theta_sigma[N_PARAMS])
    return z


def _start_state(data: TrialData, bounds: ParameterBounds):
    fit = ml_fit(data, bounds)
    th = fit.theta_hat.as_array()
    if abs(th[1]) < 1e-3:
        th[1] = -1e-3
    sd = math.sqrt(max(fit.rss, 1e-12) / max(len(data), 1))
    smin, smax = bounds.sigma
    sd = min(max(sd, smin * 2.0), smax / 2.0)
    return _to_unconstrained(np.append(th, sd), bounds)


def sample_posterior(
    data: TrialData,
    grid: DoseGrid,
    rng: np.random.Generator,
    config: MCMCConfig = MCMCConfig(),
    bounds: ParameterBounds = DEFAULT_BOUNDS,
) -> PosteriorSample:
    """Posterior draws of (theta, sigma) under the functional uniform prior.

    Random-walk Metropolis on logit/log-transformed coordinates, started at
    the least-squares fit.  During burn-in the proposal covariance follows
    the empirical covariance of the chain and its scale is tuned toward
    ``config.target_accept``; both are frozen for the retained draws.
    """
    if len(data) == 0:
        raise ValueError("no data")
    u, n, s1, s2 = data.sufficient_stats()
    args = (u, n, s1, s2, grid.array, bounds.lower, bounds.upper, bounds.sigma[0], bounds.sigma[1])
    d = N_PARAMS + 1
    z = _start_state(data, bounds)
    logp = _kernels.log_target(z, *args)
    if logp == -np.inf:
        raise ChainFailure("starting point has zero posterior density")

    chol = np.eye(d) * 0.1
    log_scale = 0.0
    history = np.empty((config.burn_in, d))
    done = 0
    batch_no = 0
    while done < config.burn_in:
        m = min(config.adapt_batch, config.burn_in - done)
        eps = rng.standard_normal((m, d))
        logu = np.log(rng.random(m))
        out = history[done : done + m]
        z, logp, acc = _kernels.rwm_chunk(z, logp, chol, math.exp(log_scale), eps, logu, *args, out)
        done += m
        batch_no += 1
        log_scale += (acc / m - config.target_accept) * min(1.0, 10.0 / math.sqrt(batch_no))
        # shape the proposal on the latter half of the chain so far, once it has some length
        if done >= config.burn_in // 5 and batch_no % 5 == 0:
            cov = np.cov(history[done // 2 : done], rowvar=False) * (2.38**2 / d) + 1e-10 * np.eye(d)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                pass

    m = config.n_draws
    eps = rng.standard_normal((m, d))
    logu = np.log(rng.random(m))
    states = np.empty((m, d))
    z, logp, acc = _kernels.rwm_chunk(z, logp, chol, math.exp(log_scale), eps, logu, *args, states)
    rate = acc / m if m else float("nan")
    if m and rate < config.min_accept:
        raise ChainFailure(f"acceptance rate {rate:.4f} after burn-in")
    draws = _kernels.batch_to_natural(states, bounds.lower, bounds.upper)
    return PosteriorSample(draws, rate)


# ---------------------------------------------------------------------------
# k-means compression
# ---------------------------------------------------------------------------


def _sq_dist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _plusplus(X, wts, k, rng):
    """k-means++ seeding; a point is drawn with probability proportional to weight x D^2."""
    T = X.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.choice(T, p=wts / wts.sum())
    d2 = _sq_dist(X, X[chosen[:1]])[:, 0]
    for j in range(1, k):
        p = wts * d2
        tot = p.sum()
        if tot > 0:
            idx = int(rng.choice(T, p=p / tot))
        else:
            idx = int(rng.choice(np.setdiff1d(np.arange(T), chosen[:j])))
        chosen[j] = idx
        d2 = np.minimum(d2, _sq_dist(X, X[idx : idx + 1])[:, 0])
    return X[chosen].copy()


def kmeans(
    X: ArrayLike,
    k: int,
    rng: np.random.Generator,
    restarts: int = 10,
    max_iter: int = 100,
    sample_weight: ArrayLike | None = None,
):
    """Lloyd's algorithm from k-means++ seeds, best of ``restarts``.

    Returns (centers, labels, sse); sse is the (weighted) within-cluster sum
    of squares.
    """
    X = np.ascontiguousarray(X, dtype=float)
    T = X.shape[0]
    if not 1 <= k <= T:
        raise ValueError(f"need 1 <= k <= {T}, got {k}")
    wts = np.ones(T) if sample_weight is None else np.ascontiguousarray(sample_weight, dtype=float)
    if k == T:
        return X.copy(), np.arange(T), 0.0
    best = None
    for _ in range(max(1, restarts)):
        C, labels, sse = _kernels.lloyd(X, wts, _plusplus(X, wts, k, rng), max_iter)
        if best is None or sse < best[2]:
            best = (C, labels, sse)
    return best


def kmeans_compress(
    post: PosteriorSample,
    k: int,
    rng: np.random.Generator,
    restarts: int = 10,
    bounds: ParameterBounds = DEFAULT_BOUNDS,
) -> ClusteredPosterior:
    """Replace the draws of theta by k cluster centers weighted by membership share.

    Clustering runs on coordinates standardized by the posterior SD of each
    parameter; sigma is ignored.  Repeated draws (rejected Metropolis moves)
    are clustered once with their multiplicity as weight, which leaves the
    objective unchanged.
    """
    th = post.theta
    T = th.shape[0]
    if k >= T:
        return ClusteredPosterior(th.copy(), np.full(T, 1.0 / T))
    mu = th.mean(axis=0)
    sd = th.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    uniq, mult = np.unique(th, axis=0, return_counts=True)
    k_eff = min(k, uniq.shape[0])
    C, labels, _ = kmeans((uniq - mu) / sd, k_eff, rng, restarts, sample_weight=mult.astype(float))
    counts = np.bincount(labels, weights=mult, minlength=C.shape[0])
    keep = counts > 0
    centers = np.array([bounds.clip(c) for c in C[keep] * sd + mu])
    return ClusteredPosterior(centers, counts[keep] / T)


@dataclass(frozen=True)
class RelativePerformance:
    """Full-sample Bayesian criterion at the k-atom and full-sample optima."""

    psi_km: float
    psi_fp: float
    seconds_km: float
    seconds_fp: float
    design_km: Design = field(repr=False, default=None)
    design_fp: Design = field(repr=False, default=None)

    @property
    def ratio(self) -> float:
        return self.psi_km / self.psi_fp

    @property
    def difference(self) -> float:
        return self.psi_fp - self.psi_km

    @property
    def efficiency(self) -> float:
        """exp of the criterion loss per parameter: a D-efficiency on the full posterior."""
        return math.exp(-self.difference / N_PARAMS)


def relative_performance(
    post: PosteriorSample,
    k: int,
    grid: DoseGrid,
    rng: np.random.Generator,
    tol: float = 1e-5,
    max_iter: int = 100_000,
    restarts: int = 10,
    bounds: ParameterBounds = DEFAULT_BOUNDS,
) -> RelativePerformance:
    """Compare the design optimized on k cluster atoms with the one optimized on all draws.

    Timings include the clustering step on the k-means side.
    """
    full = post.as_clustered()
    t0 = time.perf_counter()
    atoms = kmeans_compress(post, k, rng, restarts, bounds)
    d_km = optimize_weights(grid, atoms, tol, max_iter)
    t1 = time.perf_counter()
    d_fp = optimize_weights(grid, full, tol, max_iter)
    t2 = time.perf_counter()
    return RelativePerformance(
        bayes_criterion(d_km, full), bayes_criterion(d_fp, full), t1 - t0, t2 - t1, d_km, d_fp
    )
