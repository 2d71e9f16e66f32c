"""Run configuration: defaults, config files (JSON/YAML) and flag overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .bayes import MCMCConfig
from .model import SIGMA2, Profile
from .trial import STAGE1_SIZES, STARTING_DESIGNS, TrialSettings, Updating

SEED_ENV = "ADAPTIX_SEED"
DEFAULT_SEED = 20140612


class ConfigError(ValueError):
    def __init__(self, key: str, location: str, message: str):
        super().__init__(f"{location}: {key}: {message}")
        self.key = key
        self.location = location


@dataclass(frozen=True)
class RunConfig:
    designs: tuple[str, ...] = tuple(STARTING_DESIGNS)
    profiles: tuple[str, ...] = tuple(p.value for p in Profile)
    total_ns: tuple[int, ...] = tuple(STAGE1_SIZES)
    stage1_ns: tuple[int, ...] | None = None
    updatings: tuple[str, ...] = tuple(u.value for u in Updating)
    replications: int = 200
    seed: int = DEFAULT_SEED
    jobs: int = 1
    out: str = "results"
    opt_tol: float = 1e-5
    opt_max_iter: int = 100_000
    prune: float = 1e-8
    mcmc_burn_in: int = 10_000
    mcmc_draws: int = 10_000
    k: int = 10
    kmeans_restarts: int = 10
    sigma2: float = SIGMA2
    mae_grid: str = "interim"
    record_runtime: bool = False
    kmeans_bench_sizes: tuple[int, ...] = (15, 60, 150)

    def trial_settings(self) -> TrialSettings:
        return TrialSettings(
            sigma2=self.sigma2,
            k=self.k,
            mcmc=MCMCConfig(burn_in=self.mcmc_burn_in, n_draws=self.mcmc_draws),
            kmeans_restarts=self.kmeans_restarts,
            opt_tol=self.opt_tol,
            opt_max_iter=self.opt_max_iter,
            prune=self.prune,
            mae_grid=self.mae_grid,
        )

    def to_dict(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v) for f in fields(self)}


_FIELDS = {f.name: f for f in fields(RunConfig)}
_ALL = {
    "designs": tuple(STARTING_DESIGNS),
    "profiles": tuple(p.value for p in Profile),
    "total_ns": tuple(STAGE1_SIZES),
    "updatings": tuple(u.value for u in Updating),
}


def _as_list(value) -> list:
    if isinstance(value, str):
        return [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(value, (list, tuple)):
        return list(value)
    return [value]


def _coerce(key: str, value, location: str):
    default = _FIELDS[key].default
    try:
        if key in _ALL:
            items = _as_list(value)
            if any(str(v).lower() == "all" for v in items):
                return _ALL[key]
            if key == "designs":
                items = [str(v).upper() for v in items]
            elif key == "profiles":
                items = [Profile.parse(str(v)).value for v in items]
            elif key == "updatings":
                items = [Updating(str(v).lower()).value for v in items]
            else:
                items = [int(v) for v in items]
            bad = [v for v in items if v not in _ALL[key]]
            if bad:
                raise ValueError(f"not one of {list(_ALL[key])}: {bad}")
            return tuple(dict.fromkeys(items))
        if key in ("stage1_ns", "kmeans_bench_sizes"):
            if value is None:
                return None
            items = _as_list(value)
            if key == "stage1_ns" and any(str(v).lower() == "all" for v in items):
                return None
            return tuple(int(v) for v in items)
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(f"not a boolean: {value!r}")
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as e:
        raise ConfigError(key, location, str(e)) from None


def _validate(cfg: RunConfig, location: str) -> RunConfig:
    for key, lo in (("replications", 1), ("jobs", 1), ("k", 1), ("mcmc_draws", 1), ("opt_max_iter", 1)):
        if getattr(cfg, key) < lo:
            raise ConfigError(key, location, f"must be >= {lo}")
    if not cfg.opt_tol > 0:
        raise ConfigError("opt_tol", location, "must be positive")
    if not cfg.sigma2 > 0:
        raise ConfigError("sigma2", location, "must be positive")
    if cfg.mae_grid not in ("interim", "design"):
        raise ConfigError("mae_grid", location, "must be 'interim' or 'design'")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed", location, "must be an unsigned 64-bit integer")
    return cfg


def load_file(path: str | os.PathLike) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", str(p), "file not found")
    text = p.read_text(encoding="utf-8")
    try:
        data = json.loads(text) if p.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError("config", str(p), f"cannot parse: {e}") from None
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("config", str(p), "top level must be a mapping")
    # a run manifest carries its resolved config under "config"
    if "config" in data and isinstance(data["config"], dict) and "master_seed" in data:
        data = data["config"]
    return data


def parse_config(
    path: str | os.PathLike | None = None,
    flags: Mapping[str, Any] | None = None,
    env: Mapping[str, str] | None = None,
) -> RunConfig:
    """Resolve defaults < config file < flags.

    The seed falls back to ``$ADAPTIX_SEED`` when neither the file nor the
    flags set it.  Unknown keys and bad values raise :class:`ConfigError`.
    """
    env = os.environ if env is None else env
    values: dict[str, Any] = {}
    file_values = load_file(path) if path is not None else {}
    sources = [(file_values, str(path))]
    seed_env = env.get(SEED_ENV)
    if "seed" not in file_values and not (flags and flags.get("seed") is not None) and seed_env:
        sources.insert(0, ({"seed": seed_env}, f"${SEED_ENV}"))
    sources.append(({k: v for k, v in (flags or {}).items() if v is not None}, "command line"))
    location = "defaults"
    for mapping, location in sources:
        for key, value in mapping.items():
            if key not in _FIELDS:
                raise ConfigError(key, location, "unknown key")
            values[key] = _coerce(key, value, location)
    return _validate(dataclasses.replace(RunConfig(), **values), location)
