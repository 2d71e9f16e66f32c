"""Sigmoid Emax working model, true dose-response profiles and response simulation.

The working model is

    eta(x, theta) = theta1 + theta2 * x**theta4 / (theta3**theta4 + x**theta4)

with theta1 the placebo effect, theta2 the asymptotic maximum effect,
theta3 the ED50 and theta4 the Hill exponent.  The fraction is evaluated
as a logistic function of ``theta4 * (log x - log theta3)`` so that the
placebo dose (x = 0) maps to its limit without touching ``0**theta4`` or
``log(theta3 / 0)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

N_PARAMS = 4
MAX_DOSE = 8.0
SIGMA2 = 4.5


@dataclass(frozen=True)
class ParameterBounds:
    """Box constraints for (theta1, theta2, theta3, theta4) and the residual SD."""

    theta1: tuple[float, float] = (-10.0, 10.0)
    theta2: tuple[float, float] = (-10.0, 10.0)
    theta3: tuple[float, float] = (0.001, 1.5 * MAX_DOSE)
    theta4: tuple[float, float] = (0.5, 10.0)
    sigma: tuple[float, float] = (0.05, 20.0)

    @classmethod
    def for_max_dose(cls, max_dose: float) -> "ParameterBounds":
        return cls(theta3=(0.001, 1.5 * max_dose))

    @property
    def lower(self) -> NDArray[np.float64]:
        return np.array([self.theta1[0], self.theta2[0], self.theta3[0], self.theta4[0]])

    @property
    def upper(self) -> NDArray[np.float64]:
        return np.array([self.theta1[1], self.theta2[1], self.theta3[1], self.theta4[1]])

    def contains(self, theta: "ThetaSigEmax | ArrayLike") -> bool:
        t = np.asarray(theta, dtype=float)
        return bool(np.all(t >= self.lower) and np.all(t <= self.upper))

    def clip(self, theta: ArrayLike) -> NDArray[np.float64]:
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)


DEFAULT_BOUNDS = ParameterBounds()


@dataclass(frozen=True)
class ThetaSigEmax:
    """Sigmoid Emax parameter vector.

    Only model well-definedness (finite values, positive ED50 and Hill) is
    enforced here; the trial-specific box lives in :class:`ParameterBounds`.
    """

    theta1: float
    theta2: float
    theta3: float
    theta4: float

    def __post_init__(self):
        vals = (self.theta1, self.theta2, self.theta3, self.theta4)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite parameter in {vals}")
        if self.theta3 <= 0 or self.theta4 <= 0:
            raise ValueError("theta3 and theta4 must be positive")

    @classmethod
    def from_array(cls, a: ArrayLike) -> "ThetaSigEmax":
        a = np.asarray(a, dtype=float).ravel()
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def as_array(self) -> NDArray[np.float64]:
        return np.array([self.theta1, self.theta2, self.theta3, self.theta4])

    def __array__(self, dtype=None, copy=None):
        return self.as_array() if dtype is None else self.as_array().astype(dtype)

    def __iter__(self):
        return iter((self.theta1, self.theta2, self.theta3, self.theta4))


@dataclass(frozen=True)
class DoseGrid:
    """Strictly increasing doses in [0, max_dose]."""

    doses: tuple[float, ...]

    def __post_init__(self):
        d = tuple(float(x) for x in self.doses)
        object.__setattr__(self, "doses", d)
        if len(d) < 1:
            raise ValueError("a dose grid needs at least one dose")
        if d[0] < 0 or any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError(f"doses must be nonnegative and strictly increasing: {d}")

    @classmethod
    def equally_spaced(cls, lo: float, hi: float, n: int) -> "DoseGrid":
        return cls(tuple(np.linspace(lo, hi, n)))

    @property
    def array(self) -> NDArray[np.float64]:
        return np.array(self.doses)

    @property
    def max_dose(self) -> float:
        return self.doses[-1]

    def __len__(self) -> int:
        return len(self.doses)

    def index(self, dose: float) -> int:
        return self.doses.index(float(dose))


# 0, 0.5, ..., 8: the doses available at the interim analysis
INTERIM_GRID = DoseGrid.equally_spaced(0.0, MAX_DOSE, 17)


@dataclass(frozen=True, eq=False)
class Design:
    """Approximate design: allocation proportions over a fixed dose grid."""

    grid: DoseGrid
    weights: NDArray[np.float64]

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape != (len(self.grid),):
            raise ValueError(f"expected {len(self.grid)} weights, got shape {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, grid: DoseGrid) -> "Design":
        return cls(grid, np.full(len(grid), 1.0 / len(grid)))

    @classmethod
    def on_doses(cls, doses: Sequence[float], weights: ArrayLike | None = None) -> "Design":
        grid = DoseGrid(tuple(doses))
        if weights is None:
            return cls.uniform(grid)
        return cls(grid, np.asarray(weights, dtype=float))

    @property
    def support(self) -> NDArray[np.float64]:
        return self.grid.array[self.weights > 0]

    def __repr__(self) -> str:
        pairs = ", ".join(f"{x:g}:{w:.4f}" for x, w in zip(self.grid.doses, self.weights) if w > 0)
        return f"Design({pairs})"


def _as_theta(theta) -> NDArray[np.float64]:
    return np.asarray(theta, dtype=float).reshape(-1)


def _hill_fraction(x: NDArray[np.float64], theta3, theta4):
    """x**h / (ed50**h + x**h), its complement, and the x > 0 mask; broadcasting."""
    pos = x > 0
    z = theta4 * (np.log(np.where(pos, x, 1.0)) - np.log(theta3))
    with np.errstate(over="ignore"):
        frac = np.where(pos, 1.0 / (1.0 + np.exp(-z)), 0.0)
        comp = np.where(pos, 1.0 / (1.0 + np.exp(z)), 1.0)
    return frac, comp, pos


def emax_mean(theta, x: ArrayLike):
    """Mean response of the sigmoid Emax model; scalar in, scalar out."""
    t1, t2, t3, t4 = _as_theta(theta)
    xa = np.asarray(x, dtype=float)
    frac, _, _ = _hill_fraction(xa, t3, t4)
    out = t1 + t2 * frac
    return float(out) if out.ndim == 0 else out


def emax_gradient(theta, x: ArrayLike) -> NDArray[np.float64]:
    """Gradient of the mean in (theta1..theta4).

    Returns shape ``(4,)`` for a scalar dose and ``(q, 4)`` for q doses.
    At x = 0 the gradient is (1, 0, 0, 0).
    """
    t1, t2, t3, t4 = _as_theta(theta)
    xa = np.asarray(x, dtype=float)
    frac, comp, pos = _hill_fraction(xa, t3, t4)
    s1s = frac * comp
    logratio = np.log(np.where(pos, xa, 1.0)) - np.log(t3)
    g = np.empty(xa.shape + (N_PARAMS,))
    g[..., 0] = 1.0
    g[..., 1] = frac
    g[..., 2] = np.where(pos, -t2 * t4 / t3 * s1s, 0.0)
    g[..., 3] = np.where(pos, t2 * logratio * s1s, 0.0)
    return g


def gradient_tensor(thetas: ArrayLike, doses: ArrayLike) -> NDArray[np.float64]:
    """Gradients for a batch of parameter vectors: shape (T, q, 4)."""
    th = np.atleast_2d(np.asarray(thetas, dtype=float))
    x = np.asarray(doses, dtype=float)[None, :]
    t2, t3, t4 = th[:, 1:2], th[:, 2:3], th[:, 3:4]
    frac, comp, pos = _hill_fraction(np.broadcast_to(x, (th.shape[0], x.shape[1])), t3, t4)
    s1s = frac * comp
    logratio = np.log(np.where(pos, x, 1.0)) - np.log(t3)
    g = np.empty(frac.shape + (N_PARAMS,))
    g[..., 0] = 1.0
    g[..., 1] = frac
    g[..., 2] = np.where(pos, -t2 * t4 / t3 * s1s, 0.0)
    g[..., 3] = np.where(pos, t2 * logratio * s1s, 0.0)
    return g


def information_from_gradients(G: NDArray[np.float64], weights: ArrayLike) -> NDArray[np.float64]:
    w = np.asarray(weights, dtype=float)
    M = (G * w[:, None]).T @ G
    return 0.5 * (M + M.T)


def fisher_information(design: Design, theta) -> NDArray[np.float64]:
    """Normalized information sum_i w_i g(x_i) g(x_i)^T (no 1/sigma^2 factor)."""
    return information_from_gradients(emax_gradient(theta, design.grid.array), design.weights)


class Profile(enum.Enum):
    """True dose-response shapes used to generate data (placebo 0, max effect -1.65)."""

    LINEAR = "linear"
    QUADRATIC = "quadratic"
    EMAX = "emax"
    SIGEMAX = "sigemax"

    def mean(self, x: ArrayLike):
        xa = np.asarray(x, dtype=float)
        if self is Profile.LINEAR:
            out = -(1.65 / 8.0) * xa
        elif self is Profile.QUADRATIC:
            out = -(1.65 / 3.0) * xa + (1.65 / 36.0) * xa**2
        else:
            out = np.asarray(emax_mean(self.true_theta, xa), dtype=float)
        return float(out) if out.ndim == 0 else out

    @property
    def true_theta(self) -> ThetaSigEmax | None:
        """Generating sigmoid Emax parameters, if the profile is in the model family."""
        return _IN_FAMILY.get(self)

    @property
    def in_family(self) -> bool:
        return self in _IN_FAMILY

    @classmethod
    def parse(cls, name: str) -> "Profile":
        key = name.strip().lower().replace("_", "").replace(" ", "")
        for p in cls:
            if p.value == key:
                return p
        raise ValueError(f"unknown profile {name!r}")


_IN_FAMILY = {
    Profile.EMAX: ThetaSigEmax(0.0, -1.81, 0.79, 1.0),
    Profile.SIGEMAX: ThetaSigEmax(0.0, -1.70, 4.0, 5.0),
}


@dataclass(frozen=True, eq=False)
class TrialData:
    """Observed (dose, response) pairs with the stage each patient belongs to."""

    doses: NDArray[np.float64]
    responses: NDArray[np.float64]
    stages: NDArray[np.int64] = field(default=None)

    def __post_init__(self):
        d = np.array(self.doses, dtype=float).ravel()
        y = np.array(self.responses, dtype=float).ravel()
        s = np.ones(d.shape, dtype=np.int64) if self.stages is None else np.array(self.stages, dtype=np.int64).ravel()
        if not (d.shape == y.shape == s.shape):
            raise ValueError("doses, responses and stages must have equal length")
        if not np.all(np.isfinite(y)):
            raise ValueError("responses must be finite")
        for a in (d, y, s):
            a.setflags(write=False)
        object.__setattr__(self, "doses", d)
        object.__setattr__(self, "responses", y)
        object.__setattr__(self, "stages", s)

    def __len__(self) -> int:
        return self.doses.size

    @classmethod
    def concat(cls, parts: Iterable["TrialData"]) -> "TrialData":
        parts = list(parts)
        return cls(
            np.concatenate([p.doses for p in parts]),
            np.concatenate([p.responses for p in parts]),
            np.concatenate([p.stages for p in parts]),
        )

    def stage(self, s: int) -> "TrialData":
        m = self.stages == s
        return TrialData(self.doses[m], self.responses[m], self.stages[m])

    def sufficient_stats(self):
        """Distinct doses with per-dose counts, response sums and sums of squares."""
        u, inv = np.unique(self.doses, return_inverse=True)
        n = np.bincount(inv, minlength=u.size).astype(float)
        s1 = np.bincount(inv, weights=self.responses, minlength=u.size)
        s2 = np.bincount(inv, weights=self.responses**2, minlength=u.size)
        return u, n, s1, s2


def simulate_responses(
    profile: Profile,
    doses: Sequence[float],
    counts: Sequence[int],
    sigma2: float,
    rng: np.random.Generator,
    stage: int = 1,
) -> TrialData:
    """Draw ``counts[i]`` normal responses around ``profile.mean(doses[i])``."""
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    c = np.asarray(counts, dtype=np.int64)
    if np.any(c < 0):
        raise ValueError("counts must be nonnegative")
    x = np.repeat(np.asarray(doses, dtype=float), c)
    y = profile.mean(x) + np.sqrt(sigma2) * rng.standard_normal(x.size)
    return TrialData(x, np.atleast_1d(y), np.full(x.size, stage, dtype=np.int64))
