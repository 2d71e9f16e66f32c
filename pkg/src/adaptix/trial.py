"""Two-stage adaptive dose-finding trials and their end-of-study metrics."""

from __future__ import annotations

import enum
import functools
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .bayes import (
    ChainFailure,
    MCMCConfig,
    kmeans_compress,
    ml_fit,
    pseudo_true_params,
    sample_posterior,
)
from .design import NonConvergence, efficient_round, optimize_weights, relative_efficiency
from .model import (
    DEFAULT_BOUNDS,
    INTERIM_GRID,
    SIGMA2,
    Design,
    DoseGrid,
    Profile,
    ThetaSigEmax,
    TrialData,
    emax_mean,
    simulate_responses,
)

STARTING_DESIGNS: dict[str, tuple[float, ...]] = {
    "A": (0.0, 2.0, 4.0, 6.0, 8.0),
    "B": (0.0, 1.0, 2.0, 4.0, 8.0),
    "C": (0.0, 6.0, 7.0, 7.5, 8.0),
    "D": (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0),
}

STAGE1_SIZES: dict[int, tuple[int, ...]] = {
    150: (15, 38, 60, 83, 105, 128, 150),
    250: (15, 54, 93, 133, 172, 211, 250),
}


class Updating(enum.Enum):
    ML = "ml"
    BAYES = "bayes"
    FIXED = "fixed"


class EmptyInput(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    starting_design: str
    profile: Profile
    total_n: int
    stage1_n: int
    updating: Updating

    def __post_init__(self):
        if self.starting_design not in STARTING_DESIGNS:
            raise ValueError(f"unknown starting design {self.starting_design!r}")
        if self.total_n not in STAGE1_SIZES or self.stage1_n not in STAGE1_SIZES[self.total_n]:
            raise ValueError(f"stage-1 size {self.stage1_n} not allowed for N={self.total_n}")
        if self.updating is Updating.FIXED and self.stage1_n != self.total_n:
            raise ValueError("a fixed design has a single stage")

    @property
    def label(self) -> str:
        return f"{self.starting_design}-{self.profile.value}-N{self.total_n}-n{self.stage1_n}-{self.updating.value}"

    @property
    def data_cell(self) -> tuple[str, str, int, int]:
        """The scenario without its updating rule; cells sharing it share stage-1 data."""
        return (self.starting_design, self.profile.value, self.total_n, self.stage1_n)


def enumerate_scenarios(include_fixed: bool = True) -> list[ScenarioSpec]:
    """All adaptive cells (ML and Bayes at every timing) followed by the fixed baselines."""
    out = []
    for d in STARTING_DESIGNS:
        for p in Profile:
            for n in STAGE1_SIZES:
                for n1 in STAGE1_SIZES[n]:
                    for u in (Updating.ML, Updating.BAYES):
                        out.append(ScenarioSpec(d, p, n, n1, u))
    if include_fixed:
        for d in STARTING_DESIGNS:
            for p in Profile:
                for n in STAGE1_SIZES:
                    out.append(ScenarioSpec(d, p, n, n, Updating.FIXED))
    return out


@functools.lru_cache(maxsize=None)
def _data_cells() -> dict[tuple, int]:
    cells: dict[tuple, int] = {}
    for s in enumerate_scenarios():
        cells.setdefault(s.data_cell, len(cells))
    return cells


def replication_seed(master_seed: int, spec: ScenarioSpec, replication: int) -> int:
    """64-bit seed from (master seed, data cell index, replication index).

    ML, Bayes and fixed cells with the same design/profile/N/stage-1 size get
    identical seeds, so their stage-1 data coincide replication by replication.
    """
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(_data_cells()[spec.data_cell], replication))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


@dataclass(frozen=True)
class TrialSettings:
    sigma2: float = SIGMA2
    k: int = 10
    mcmc: MCMCConfig = MCMCConfig()
    kmeans_restarts: int = 10
    opt_tol: float = 1e-5
    opt_max_iter: int = 100_000
    prune: float = 1e-8
    interim_grid: DoseGrid = INTERIM_GRID
    mae_grid: str = "interim"  # or "design": the starting design's doses


@dataclass(frozen=True, eq=False)
class TrialResult:
    spec: ScenarioSpec
    seed: int
    releff: float | None
    mae: float
    theta_hat_final: ThetaSigEmax
    flag_fit_fallback: bool = False
    flag_chain_fallback: bool = False
    stage1_counts: dict[float, int] = field(default_factory=dict)
    stage2_counts: dict[float, int] = field(default_factory=dict)
    stage2_design: Design | None = None
    runtime_ms: float = 0.0


@functools.lru_cache(maxsize=None)
def _theta_true(profile: Profile, grid: DoseGrid) -> ThetaSigEmax:
    return pseudo_true_params(profile, grid)


def mae(theta_hat, profile: Profile, eval_grid: DoseGrid = INTERIM_GRID) -> float:
    """Mean absolute deviation of the fitted from the true curve over ``eval_grid``."""
    x = eval_grid.array
    return float(np.mean(np.abs(emax_mean(theta_hat, x) - profile.mean(x))))


def _counts(alloc) -> dict[float, int]:
    doses, n = alloc.support()
    return {float(d): int(c) for d, c in zip(doses, n)}


def _interim_design(data1: TrialData, spec: ScenarioSpec, st: TrialSettings, rng: np.random.Generator):
    """Stage-2 design from the stage-1 data, or None with a flag name on failure."""
    grid = st.interim_grid
    if spec.updating is Updating.ML:
        fit = ml_fit(data1, DEFAULT_BOUNDS)
        if fit.degenerate or not fit.converged:
            return None, "fit"
        objective = fit.theta_hat
    else:
        try:
            post = sample_posterior(data1, grid, rng, st.mcmc, DEFAULT_BOUNDS)
        except ChainFailure:
            return None, "chain"
        objective = kmeans_compress(post, st.k, rng, st.kmeans_restarts, DEFAULT_BOUNDS)
    try:
        return optimize_weights(grid, objective, st.opt_tol, st.opt_max_iter, st.prune), None
    except NonConvergence as e:
        # an uncertified iterate of a concave ascent is still a sound design
        return e.design, None


def run_trial(spec: ScenarioSpec, seed: int, settings: TrialSettings = TrialSettings()) -> TrialResult:
    """Simulate one two-stage trial.

    Stage 1 spreads ``stage1_n`` patients equally over the starting design.
    At interim the stage-2 weights on the interim grid are optimized for the
    least-squares estimate (ML) or for k cluster atoms of the posterior
    (Bayes).  The pooled data are fitted by least squares at the end.  If the
    interim fit or chain fails, stage 2 continues the starting design.
    """
    t0 = time.perf_counter()
    st = settings
    data_ss, interim_ss, stage2_ss = np.random.SeedSequence(seed).spawn(3)
    start = Design.on_doses(STARTING_DESIGNS[spec.starting_design])
    alloc1 = efficient_round(start, spec.stage1_n)
    data1 = simulate_responses(
        spec.profile, start.grid.doses, alloc1.counts, st.sigma2, np.random.default_rng(data_ss), stage=1
    )

    releff = None
    design2 = None
    flag = None
    stage2_counts: dict[float, int] = {}
    data = data1
    if spec.updating is not Updating.FIXED:
        design2, flag = _interim_design(data1, spec, st, np.random.default_rng(interim_ss))
        if design2 is None:
            design2 = start
        theta_true = _theta_true(spec.profile, st.interim_grid)
        releff = relative_efficiency(design2, theta_true, st.interim_grid, st.opt_tol, st.opt_max_iter)
        n2 = spec.total_n - spec.stage1_n
        if n2 > 0:
            alloc2 = efficient_round(design2, n2)
            stage2_counts = _counts(alloc2)
            data2 = simulate_responses(
                spec.profile, design2.grid.doses, alloc2.counts, st.sigma2, np.random.default_rng(stage2_ss), stage=2
            )
            data = TrialData.concat([data1, data2])

    final = ml_fit(data, DEFAULT_BOUNDS)
    eval_grid = st.interim_grid if st.mae_grid == "interim" else start.grid
    return TrialResult(
        spec=spec,
        seed=seed,
        releff=releff,
        mae=mae(final.theta_hat, spec.profile, eval_grid),
        theta_hat_final=final.theta_hat,
        flag_fit_fallback=flag == "fit",
        flag_chain_fallback=flag == "chain",
        stage1_counts=_counts(alloc1),
        stage2_counts=stage2_counts,
        stage2_design=design2,
        runtime_ms=(time.perf_counter() - t0) * 1e3,
    )


@dataclass(frozen=True)
class CellSummary:
    n_trials: int
    releff_mean: float | None
    releff_q10: float | None
    releff_q90: float | None
    mae_mean: float
    ratio_mae: float | None
    n_fit_fallback: int
    n_chain_fallback: int


def _mean(values: Iterable[float]) -> float:
    v = list(values)
    return math.fsum(v) / len(v)


def aggregate(results: Sequence[TrialResult], fixed_baseline: Sequence[TrialResult] | None = None) -> CellSummary:
    """Summary of one scenario cell; invariant under reordering of either input.

    Ratio_MAE is mean(MAE fixed) / mean(MAE adaptive), None without a baseline.
    """
    if not results:
        raise EmptyInput("no trial results to aggregate")
    rel = sorted(r.releff for r in results if r.releff is not None)
    mae_adapt = _mean(r.mae for r in results)
    ratio = None
    if fixed_baseline:
        ratio = _mean(r.mae for r in fixed_baseline) / mae_adapt if mae_adapt > 0 else math.inf
    return CellSummary(
        n_trials=len(results),
        releff_mean=_mean(rel) if rel else None,
        releff_q10=float(np.quantile(rel, 0.1)) if rel else None,
        releff_q90=float(np.quantile(rel, 0.9)) if rel else None,
        mae_mean=mae_adapt,
        ratio_mae=ratio,
        n_fit_fallback=sum(r.flag_fit_fallback for r in results),
        n_chain_fallback=sum(r.flag_chain_fallback for r in results),
    )
