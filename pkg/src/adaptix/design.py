"""D-optimal and Bayesian D-optimal weights on a fixed dose grid.

Objectives are either a single parameter vector (locally optimal design) or
a discrete distribution of weighted parameter atoms (Bayesian design).  All
criteria use the log-determinant of the normalized information matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.typing import ArrayLike, NDArray

from . import _kernels
from .model import (
    DEFAULT_BOUNDS,
    N_PARAMS,
    Design,
    DoseGrid,
    ParameterBounds,
    ThetaSigEmax,
    emax_gradient,
    gradient_tensor,
)


class NonConvergence(RuntimeError):
    """Iteration cap reached before the optimality certificate; ``design`` is best-so-far."""

    def __init__(self, message: str, design: Design, max_variance: float):
        super().__init__(message)
        self.design = design
        self.max_variance = max_variance


class Singular(ValueError):
    pass


class InfeasibleRounding(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ClusteredPosterior:
    """Discrete distribution: k parameter atoms with probabilities."""

    centers: NDArray[np.float64]
    weights: NDArray[np.float64]

    def __post_init__(self):
        c = np.array(self.centers, dtype=float).reshape(-1, N_PARAMS)
        w = np.array(self.weights, dtype=float).ravel()
        if c.shape[0] != w.size:
            raise ValueError("one weight per center required")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("atom weights must be positive and sum to 1")
        c.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)

    @classmethod
    def point_mass(cls, theta) -> "ClusteredPosterior":
        return cls(np.asarray(theta, dtype=float)[None, :], np.ones(1))

    @classmethod
    def equal_weights(cls, thetas: ArrayLike) -> "ClusteredPosterior":
        """Empirical distribution of ``thetas``; repeated rows merge into one atom."""
        th = np.asarray(thetas, dtype=float).reshape(-1, N_PARAMS)
        uniq, counts = np.unique(th, axis=0, return_counts=True)
        return cls(uniq, counts / th.shape[0])

    @property
    def k(self) -> int:
        return self.weights.size

    def atoms(self) -> list[ThetaSigEmax]:
        return [ThetaSigEmax.from_array(c) for c in self.centers]

    def within(self, bounds: ParameterBounds = DEFAULT_BOUNDS) -> bool:
        return all(bounds.contains(c) for c in self.centers)


@dataclass(frozen=True, eq=False)
class Allocation:
    grid: DoseGrid
    counts: NDArray[np.int64]

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64)
        if c.shape != (len(self.grid),) or np.any(c < 0):
            raise ValueError("counts must be nonnegative, one per grid dose")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def support(self) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
        m = self.counts > 0
        return self.grid.array[m], self.counts[m]


Objective = Union[ThetaSigEmax, ClusteredPosterior, NDArray[np.float64]]


def _atoms(objective) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if isinstance(objective, ClusteredPosterior):
        return np.asarray(objective.centers), np.asarray(objective.weights)
    # PosteriorSample and friends expose their draws as equally weighted atoms
    to_atoms = getattr(objective, "as_clustered", None)
    if to_atoms is not None:
        return _atoms(to_atoms())
    th = np.asarray(objective, dtype=float).reshape(1, N_PARAMS)
    return th, np.ones(1)


def _prepare(grid: DoseGrid, objective):
    thetas, alpha = _atoms(objective)
    G = np.ascontiguousarray(gradient_tensor(thetas, grid.array))
    return G, np.ascontiguousarray(alpha, dtype=float)


def log_det(M: NDArray[np.float64]) -> float:
    """log det of a 4x4 information matrix, -inf when numerically singular."""
    L = np.empty((N_PARAMS, N_PARAMS))
    return float(_kernels._chol4(np.ascontiguousarray(M, dtype=float), L))


def log_det_criterion(design: Design, theta) -> float:
    G = np.ascontiguousarray(emax_gradient(theta, design.grid.array)[None])
    return float(_kernels.criterion_only(G, np.ones(1), np.ascontiguousarray(design.weights)))


def bayes_criterion(design: Design, post) -> float:
    """Atom-weighted mean of log det M(design, theta_c)."""
    G, alpha = _prepare(design.grid, post)
    return float(_kernels.criterion_only(G, alpha, np.ascontiguousarray(design.weights)))


def standardized_variances(design: Design, objective) -> NDArray[np.float64]:
    """Mean over atoms of g(x_i)^T M^{-1} g(x_i) for every grid dose."""
    G, alpha = _prepare(design.grid, objective)
    dbar = np.empty(len(design.grid))
    crit = _kernels.criterion_and_variance(G, alpha, np.ascontiguousarray(design.weights), dbar)
    if crit == -np.inf:
        raise Singular("information matrix is singular for the given design")
    return dbar


def equivalence_certificate(design: Design, objective) -> float:
    """max_i of the standardized variance; <= 4 (1 + tol) certifies optimality on the grid."""
    return float(standardized_variances(design, objective).max())


@dataclass(frozen=True, eq=False)
class OptimResult:
    design: Design
    max_variance: float
    criterion: float
    iterations: int
    converged: bool
    criterion_trace: NDArray[np.float64] = field(default=None, repr=False)
    weight_trace: NDArray[np.float64] = field(default=None, repr=False)


def optimize_weights_detailed(
    grid: DoseGrid,
    objective,
    tol: float = 1e-5,
    max_iter: int = 100_000,
    prune: float = 1e-8,
    w0: ArrayLike | None = None,
    record: int = 0,
) -> OptimResult:
    """Multiplicative algorithm; see :func:`optimize_weights`.

    ``record`` keeps the criterion value and weights of the first ``record``
    iterates (iterate 0 is the starting design).
    """
    if len(grid) < N_PARAMS:
        raise ValueError(f"need at least {N_PARAMS} doses, got {len(grid)}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    G, alpha = _prepare(grid, objective)
    q = len(grid)
    if w0 is None:
        start = np.full(q, 1.0 / q)
    else:
        start = np.asarray(w0, dtype=float).copy()
        start /= start.sum()
    hist_f = np.empty(record)
    hist_w = np.empty((record, q))
    w, dmax, crit, iters, ok = _kernels.multiplicative(G, alpha, start, float(tol), int(max_iter), hist_f, hist_w)
    w = np.where(w < prune, 0.0, w)
    w /= w.sum()
    n_rec = min(record, iters + 1)
    return OptimResult(
        Design(grid, w), float(dmax), float(crit), int(iters), bool(ok), hist_f[:n_rec], hist_w[:n_rec]
    )


def optimize_weights(
    grid: DoseGrid,
    objective,
    tol: float = 1e-5,
    max_iter: int = 100_000,
    prune: float = 1e-8,
    w0: ArrayLike | None = None,
) -> Design:
    """D-optimal (local) or Bayesian D-optimal weights over ``grid``.

    Starts from uniform weights (or ``w0``, which must be strictly positive
    where mass may end up) and iterates ``w_i <- w_i * dbar_i / 4`` until
    ``max_i dbar_i <= 4 (1 + tol)``; weights below ``prune`` are then
    zeroed.  Raises :class:`NonConvergence` carrying the best-so-far design
    when ``max_iter`` is exhausted.
    """
    res = optimize_weights_detailed(grid, objective, tol, max_iter, prune, w0)
    if not res.converged:
        raise NonConvergence(
            f"no certificate after {res.iterations} iterations (max variance {res.max_variance:.6g})",
            res.design,
            res.max_variance,
        )
    return res.design


def efficient_round(design: Design, n: int) -> Allocation:
    """Efficient apportionment of ``n`` patients to the support of ``design``."""
    w = design.weights
    support = np.flatnonzero(w > 0)
    ell = support.size
    if n < ell:
        raise InfeasibleRounding(f"cannot place {n} patients on {ell} support points")
    ws = w[support]
    counts = np.ceil((n - ell / 2.0) * ws).astype(np.int64)
    # argmin/argmax return the first hit, i.e. the lowest dose on ties
    while counts.sum() < n:
        counts[np.argmin(counts / ws)] += 1
    while counts.sum() > n:
        counts[np.argmax((counts - 1) / ws)] -= 1
    full = np.zeros(len(design.grid), dtype=np.int64)
    full[support] = counts
    return Allocation(design.grid, full)


def _multiplicative_numpy(G: NDArray[np.float64], tol: float, max_iter: int) -> NDArray[np.float64]:
    """Local D-optimal weights for any parameter count p (G is q x p)."""
    q, p = G.shape
    w = np.full(q, 1.0 / q)
    for _ in range(max_iter):
        M = (G * w[:, None]).T @ G
        d = np.einsum("ij,jk,ik->i", G, np.linalg.inv(M), G)
        if d.max() <= p * (1 + tol):
            return w
        w = w * d / p
        w /= w.sum()
    raise NonConvergence("reference optimum did not converge", Design(DoseGrid(tuple(range(q))), w), float(d.max()))


def relative_efficiency(
    candidate: Design,
    theta_true,
    grid: DoseGrid,
    tol: float = 1e-5,
    max_iter: int = 100_000,
    fixed_hill: bool = False,
) -> float:
    """D-efficiency (det M(candidate) / det M(opt)) ** (1/p) at the true parameters.

    The reference optimum is computed over ``grid``.  With ``fixed_hill``
    the Hill exponent is treated as known (3-parameter Emax information).
    """
    if fixed_hill:
        p = 3
        Gc = emax_gradient(theta_true, candidate.grid.array)[:, :p]
        Gr = emax_gradient(theta_true, grid.array)[:, :p]
        w_opt = _multiplicative_numpy(Gr, tol, max_iter)
        ld_ref = np.linalg.slogdet((Gr * w_opt[:, None]).T @ Gr)[1]
        Mc = (Gc * candidate.weights[:, None]).T @ Gc
        sign, ld_c = np.linalg.slogdet(Mc)
        if sign <= 0 or np.linalg.matrix_rank(Mc, hermitian=True) < p:
            return 0.0
    else:
        p = N_PARAMS
        ld_ref = log_det_criterion(optimize_weights(grid, theta_true, tol, max_iter), theta_true)
        ld_c = log_det_criterion(candidate, theta_true)
        if ld_c == -math.inf:
            return 0.0
    eff = math.exp((ld_c - ld_ref) / p)
    return min(max(eff, 0.0), 1.0)
