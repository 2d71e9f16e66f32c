"""Batch execution of scenario cells and CSV persistence."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import statistics
import subprocess
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .bayes import relative_performance, sample_posterior
from .config import RunConfig
from .design import efficient_round, relative_efficiency
from .model import INTERIM_GRID, Design, Profile, simulate_responses
from .trial import (
    STARTING_DESIGNS,
    ScenarioSpec,
    Updating,
    aggregate,
    enumerate_scenarios,
    replication_seed,
    run_trial,
    _theta_true,
)

log = logging.getLogger(__name__)

TRIAL_COLUMNS = [
    "scenario_id", "design", "profile", "total_n", "stage1_n", "updating", "replication",
    "seed", "releff", "mae", "flag_fit_fallback", "flag_chain_fallback", "runtime_ms",
]
SUMMARY_COLUMNS = [
    "scenario_id", "design", "profile", "total_n", "stage1_n", "updating", "n_trials",
    "releff_mean", "releff_q10", "releff_q90", "mae_mean", "ratio_mae",
    "n_fit_fallback", "n_chain_fallback",
]
PROFILE_ORDER = [Profile.LINEAR, Profile.QUADRATIC, Profile.EMAX, Profile.SIGEMAX]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_bytes(buf.getvalue().encode("utf-8"))


def select_cells(config: RunConfig) -> list[tuple[int, ScenarioSpec]]:
    """(scenario_id, spec) pairs passing the config filters, in canonical order."""
    out = []
    for sid, s in enumerate(enumerate_scenarios()):
        if s.starting_design not in config.designs or s.profile.value not in config.profiles:
            continue
        if s.total_n not in config.total_ns or s.updating.value not in config.updatings:
            continue
        if config.stage1_ns is not None and s.stage1_n not in config.stage1_ns:
            continue
        out.append((sid, s))
    return out


@dataclass(frozen=True)
class TrialRow:
    """One line of trials.csv, as written."""

    scenario_id: int
    design: str
    profile: str
    total_n: int
    stage1_n: int
    updating: str
    replication: int
    seed: int
    releff: float | None
    mae: float
    flag_fit_fallback: bool
    flag_chain_fallback: bool
    runtime_ms: float | None

    def values(self) -> list:
        return [getattr(self, c) for c in TRIAL_COLUMNS]

    @classmethod
    def parse(cls, rec: dict[str, str]) -> "TrialRow":
        opt = lambda s: float(s) if s != "" else None  # noqa: E731
        return cls(
            int(rec["scenario_id"]), rec["design"], rec["profile"], int(rec["total_n"]),
            int(rec["stage1_n"]), rec["updating"], int(rec["replication"]), int(rec["seed"]),
            opt(rec["releff"]), float(rec["mae"]), rec["flag_fit_fallback"] == "1",
            rec["flag_chain_fallback"] == "1", opt(rec["runtime_ms"]),
        )


def _task(args):
    sid, spec, rep, seed, settings, record_runtime = args
    try:
        r = run_trial(spec, seed, settings)
    except Exception:
        return sid, rep, None, traceback.format_exc()
    row = TrialRow(
        sid, spec.starting_design, spec.profile.value, spec.total_n, spec.stage1_n, spec.updating.value,
        rep, seed, r.releff, r.mae, r.flag_fit_fallback, r.flag_chain_fallback,
        round(r.runtime_ms, 3) if record_runtime else None,
    )
    return sid, rep, row, None


def summarize(rows: Sequence[TrialRow]) -> list[list]:
    """summary.csv rows from trial rows; the fixed cell with matching design/profile/N is the MAE baseline."""
    by_cell: dict[int, list[TrialRow]] = {}
    for r in rows:
        by_cell.setdefault(r.scenario_id, []).append(r)
    fixed = {
        (c[0].design, c[0].profile, c[0].total_n): c for c in by_cell.values() if c[0].updating == Updating.FIXED.value
    }
    out = []
    for sid in sorted(by_cell):
        cell = by_cell[sid]
        h = cell[0]
        baseline = fixed.get((h.design, h.profile, h.total_n)) if h.updating != Updating.FIXED.value else None
        s = aggregate(cell, baseline)
        out.append([
            sid, h.design, h.profile, h.total_n, h.stage1_n, h.updating, s.n_trials,
            s.releff_mean, s.releff_q10, s.releff_q90, s.mae_mean, s.ratio_mae,
            s.n_fit_fallback, s.n_chain_fallback,
        ])
    return out


def read_trials(path: str | Path) -> list[TrialRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [TrialRow.parse(rec) for rec in csv.DictReader(fh)]


def _code_version() -> str:
    try:
        sha = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        sha = ""
    return f"{__version__}+g{sha}" if sha else __version__


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(config: RunConfig) -> int:
    """Simulate every selected cell; write trials.csv, summary.csv and manifest.json.

    Returns the process exit status: 0 on success, 1 if any trial failed
    (failures go to failures.log; completed rows are still written).
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    settings = config.trial_settings()
    cells = select_cells(config)
    tasks = [
        (sid, spec, rep, replication_seed(config.seed, spec, rep), settings, config.record_runtime)
        for sid, spec in cells
        for rep in range(config.replications)
    ]
    log.info("running %d cells x %d replications", len(cells), config.replications)
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            results = list(pool.map(_task, tasks, chunksize=max(1, len(tasks) // (8 * config.jobs))))
    else:
        results = [_task(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1]))
    rows = [r[2] for r in results if r[2] is not None]
    failures = [r for r in results if r[2] is None]

    _write_csv(out / "trials.csv", TRIAL_COLUMNS, (r.values() for r in rows))
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summarize(rows))
    if failures:
        with open(out / "failures.log", "w", encoding="utf-8") as fh:
            for sid, rep, _, tb in failures:
                fh.write(f"scenario {sid} replication {rep}\n{tb}\n")
        log.error("%d trials failed; see %s", len(failures), out / "failures.log")
    manifest = {
        "package": "adaptix",
        "code_version": _code_version(),
        "master_seed": config.seed,
        "seed_derivation": "SeedSequence(entropy=master_seed, spawn_key=(data_cell_index, replication))",
        "config": config.to_dict(),
        "n_cells": len(cells),
        "n_trials": len(rows),
        "n_failed": len(failures),
        "files": {name: _sha256(out / name) for name in ("trials.csv", "summary.csv")},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 1 if failures else 0


def table3(config: RunConfig) -> list[list]:
    """Efficiency of each equally weighted starting design at the true parameters.

    Rows are designs, columns profiles.  The Emax column uses the
    3-parameter Emax information (Hill fixed at 1); the other columns use
    the 4-parameter sigmoid Emax model at the (pseudo-)true parameters.
    """
    rows = []
    for d, doses in STARTING_DESIGNS.items():
        start = Design.on_doses(doses)
        row = [d]
        for p in PROFILE_ORDER:
            theta = _theta_true(p, INTERIM_GRID)
            row.append(
                relative_efficiency(
                    start, theta, INTERIM_GRID, config.opt_tol, config.opt_max_iter, fixed_hill=p is Profile.EMAX
                )
            )
        rows.append(row)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "table3.csv", ["design"] + [p.value for p in PROFILE_ORDER], rows)
    return rows


KMEANS_BENCH_DESIGN = "B"
KMEANS_BENCH_COLUMNS = [
    "stage1_n", "replication", "seed", "psi_km", "psi_fp", "ratio", "difference", "efficiency",
    "seconds_km", "seconds_fp",
]


def kmeans_bench_seed(master_seed: int, stage1_n: int, replication: int) -> int:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(1_000_000 + stage1_n, replication))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def kmeans_bench_replicate(stage1_n: int, seed: int, config: RunConfig):
    """One replicate of the k-means versus full-posterior comparison (design B, sigmoid Emax truth)."""
    data_ss, mcmc_ss, km_ss = np.random.SeedSequence(seed).spawn(3)
    start = Design.on_doses(STARTING_DESIGNS[KMEANS_BENCH_DESIGN])
    alloc = efficient_round(start, stage1_n)
    data = simulate_responses(
        Profile.SIGEMAX, start.grid.doses, alloc.counts, config.sigma2, np.random.default_rng(data_ss)
    )
    st = config.trial_settings()
    post = sample_posterior(data, INTERIM_GRID, np.random.default_rng(mcmc_ss), st.mcmc)
    return relative_performance(
        post, config.k, INTERIM_GRID, np.random.default_rng(km_ss), config.opt_tol, config.opt_max_iter,
        config.kmeans_restarts,
    )


def _bench_task(args):
    n1, rep, seed, config = args
    rp = kmeans_bench_replicate(n1, seed, config)
    return [n1, rep, seed, rp.psi_km, rp.psi_fp, rp.ratio, rp.difference, rp.efficiency, rp.seconds_km, rp.seconds_fp]


def kmeans_bench(config: RunConfig) -> list[list]:
    """k-means relative performance study; writes kmeans_bench.csv and its per-size summary."""
    tasks = [
        (n1, rep, kmeans_bench_seed(config.seed, n1, rep), config)
        for n1 in config.kmeans_bench_sizes
        for rep in range(config.replications)
    ]
    if config.jobs > 1:
        with ProcessPoolExecutor(max_workers=config.jobs) as pool:
            rows = list(pool.map(_bench_task, tasks))
    else:
        rows = [_bench_task(t) for t in tasks]
    summary = []
    for n1 in config.kmeans_bench_sizes:
        sel = [r for r in rows if r[0] == n1]
        summary.append([
            n1, len(sel),
            statistics.fmean(r[7] for r in sel),
            statistics.fmean(r[5] for r in sel),
            statistics.fmean(r[6] for r in sel),
            statistics.median(r[9] / r[8] for r in sel),
        ])
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "kmeans_bench.csv", KMEANS_BENCH_COLUMNS, rows)
    _write_csv(
        out / "kmeans_bench_summary.csv",
        ["stage1_n", "replications", "mean_efficiency", "mean_ratio", "mean_difference", "median_speedup"],
        summary,
    )
    return summary
