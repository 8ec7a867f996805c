"""Experiment sweeps, result files and bootstrap-IQM reporting."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attack import ATTACKS, LINE_SEARCHED, AttackConfig, percent_error, run_attack
from .data import ConfigurationError, Dataset, pairwise_sigma, read_meta
from .envs import (
    GRID_POLICY_TEMPERATURE,
    Gridworld,
    chain_evaluation_policy,
    generate_dataset,
    gridworld_evaluation_policy,
    random_chain,
)
from .estimators import METHODS, EstimatorSettings
from .influence import TARGETS, fit_method, influence_scores
from .policies import PolicySpec, epsilon_greedy

log = logging.getLogger(__name__)

ENVIRONMENTS = ("gridworld", "chain")
RESULT_COLUMNS = ("environment", "method", "attack", "frac", "epsilon", "alpha", "p", "seed", "trial",
                  "v_org", "v_pert", "pct_error", "beta", "wall_time", "error")
REPORT_COLUMNS = ("environment", "method", "attack", "frac", "alpha", "p", "n_seeds", "iqm", "lb", "ub")
RANDOMIZED = ("random", "random-dope")


def _grid(spec, name: str) -> tuple[float, ...]:
    """A grid given as a list or as {start, stop, step} (stop exclusive, like arange)."""
    if isinstance(spec, dict):
        try:
            start, stop, step = float(spec["start"]), float(spec["stop"]), float(spec["step"])
        except KeyError as exc:
            raise ConfigurationError(f"{name} grid needs start, stop and step") from exc
        if step <= 0:
            raise ConfigurationError(f"{name} grid step must be positive")
        count = math.ceil(round((stop - start) / step, 9))
        values = [round(start + k * step, 12) for k in range(max(count, 0))]
    else:
        values = [float(v) for v in spec]
    if not values:
        raise ConfigurationError(f"{name} grid is empty")
    return tuple(values)


def _norm_value(p) -> float:
    if isinstance(p, str):
        if p.lower() in ("inf", "infinity"):
            return math.inf
        p = float(p)
    p = float(p)
    if p not in (1.0, 2.0, math.inf):
        raise ConfigurationError(f"p must be 1, 2 or inf, got {p!r}")
    return p


def format_norm(p: float) -> str:
    return "inf" if math.isinf(p) else str(int(p))


@dataclass(frozen=True)
class ExperimentConfig:
    environment: str = "gridworld"
    behavior_epsilon: float = 0.05
    n_episodes: int = 500
    horizon: int = 50
    gamma: float = 0.95
    feature_map: str = "affine"
    temperature: float = GRID_POLICY_TEMPERATURE
    chain_states: int = 5
    chain_seed: int = 0
    methods: tuple[str, ...] = ("brm", "wis", "pdis", "cpdis", "wdr")
    attacks: tuple[str, ...] = ("dope",)
    target: str = "features"
    fracs: tuple[float, ...] = _grid({"start": 0.0, "stop": 0.51, "step": 0.05}, "frac")
    alphas: tuple[float, ...] = (0.05,)
    p: float = 1.0
    direction: int = -1
    seeds: tuple[int, ...] = tuple(range(10))
    trials: int = 50
    lambda_q: float = 1e-2
    lambda_b: float = 1e-2
    epochs: int = 5000
    lr: float = 0.5
    clip: float = 0.01
    behavior_solver: str = "newton"
    discount_mode: str = "standard"
    resolution: int = 20
    iterations: int = 1
    threshold_trick: bool = True
    sigma_max_features: int = 10_000
    record_wall_time: bool = False
    bootstrap: int = 2000

    def __post_init__(self):
        if self.environment not in ENVIRONMENTS:
            raise ConfigurationError(f"unknown environment {self.environment!r}; choose from {ENVIRONMENTS}")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigurationError(f"unknown estimator {m!r}; choose from {METHODS}")
        for a in self.attacks:
            if a not in ATTACKS:
                raise ConfigurationError(f"unknown attack {a!r}; choose from {ATTACKS}")
        if self.target not in TARGETS:
            raise ConfigurationError(f"unknown target {self.target!r}")
        if not (self.methods and self.attacks and self.fracs and self.alphas and self.seeds):
            raise ConfigurationError("methods, attacks, grids and seeds must be non-empty")
        if any(f < 0 for f in self.fracs) or any(not 0 <= a <= 1 for a in self.alphas):
            raise ConfigurationError("fracs must be >= 0 and alphas in [0, 1]")
        if self.direction not in (1, -1):
            raise ConfigurationError("direction must be +1 or -1")
        if self.trials < 1 or self.n_episodes < 1 or self.horizon < 1:
            raise ConfigurationError("trials, n_episodes and horizon must be >= 1")
        object.__setattr__(self, "p", _norm_value(self.p))

    @property
    def settings(self) -> EstimatorSettings:
        return EstimatorSettings(lambda_q=self.lambda_q, lambda_b=self.lambda_b, epochs=self.epochs,
                                 lr=self.lr, clip=self.clip, discount_mode=self.discount_mode,
                                 behavior_solver=self.behavior_solver)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        kw = dict(raw)
        for key in ("methods", "attacks"):
            if key in kw:
                kw[key] = tuple(kw[key])
        if "fracs" in kw:
            kw["fracs"] = _grid(kw["fracs"], "frac")
        if "alphas" in kw:
            kw["alphas"] = _grid(kw["alphas"], "alpha")
        if "seeds" in kw:
            s = kw["seeds"]
            kw["seeds"] = tuple(range(s)) if isinstance(s, int) else tuple(int(v) for v in s)
        return cls(**kw)

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


# ----------------------------------------------------------- environments


def make_environment(cfg: ExperimentConfig):
    """Return ``(env, evaluation_policy, behaviour_policy)``."""
    if cfg.environment == "gridworld":
        env = Gridworld(feature_map=cfg.feature_map)
        pi = gridworld_evaluation_policy(cfg.feature_map, cfg.temperature)
    else:
        env = random_chain(cfg.chain_states, 2, cfg.gamma, seed=cfg.chain_seed)
        pi = chain_evaluation_policy(cfg.chain_states, 2, cfg.chain_seed)
    behavior = epsilon_greedy(pi, cfg.behavior_epsilon) if cfg.behavior_epsilon > 0 else pi
    return env, pi, behavior


def make_dataset(cfg: ExperimentConfig, seed: int) -> Dataset:
    env, _, behavior = make_environment(cfg)
    ds = generate_dataset(env, behavior, cfg.n_episodes, cfg.horizon, seed, cfg.gamma)
    meta = dict(ds.meta)
    meta.update(behavior_epsilon=cfg.behavior_epsilon, temperature=cfg.temperature,
                chain_states=cfg.chain_states, chain_seed=cfg.chain_seed)
    return replace(ds, meta=meta)


def policy_from_meta(meta: dict) -> PolicySpec:
    """Rebuild the evaluation policy recorded in a dataset's metadata."""
    env = meta.get("environment", "gridworld")
    if env == "gridworld":
        return gridworld_evaluation_policy(meta.get("feature_map", "affine"),
                                           float(meta.get("temperature", GRID_POLICY_TEMPERATURE)))
    if env == "chain":
        return chain_evaluation_policy(int(meta.get("chain_states", 5)), 2, int(meta.get("chain_seed", 0)))
    raise ConfigurationError(f"cannot rebuild the evaluation policy for environment {env!r}")


def config_from_meta(meta: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    kw = {}
    for key, cast in (("environment", str), ("feature_map", str), ("temperature", float),
                      ("chain_states", int), ("chain_seed", int), ("behavior_epsilon", float)):
        if key in meta:
            kw[key] = cast(meta[key])
    return replace(base, **kw)


@lru_cache(maxsize=4)
def _seed_data(cfg: ExperimentConfig, seed: int):
    ds = make_dataset(cfg, seed)
    sigma = pairwise_sigma(ds, p=cfg.p, max_features=cfg.sigma_max_features, seed=seed)
    return ds, sigma


# ------------------------------------------------------------------ sweep


@dataclass(frozen=True)
class ResultRow:
    environment: str
    method: str
    attack: str
    frac: float
    epsilon: float
    alpha: float
    p: float
    seed: int
    trial: int
    v_org: float | None
    v_pert: float | None
    pct_error: float | None
    beta: float | None
    wall_time: float | None = None
    error: str = ""

    def as_strings(self) -> list[str]:
        out = []
        for name in RESULT_COLUMNS:
            v = getattr(self, name)
            if v is None:
                out.append("")
            elif name == "p":
                out.append(format_norm(v))
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


def _trial_seed(seed: int, trial: int, attack: str) -> int:
    code = ATTACKS.index(attack)
    return int(np.random.SeedSequence([seed, trial, code]).generate_state(1)[0])


def run_cell(cfg: ExperimentConfig, seed: int, method: str, attack: str) -> list[ResultRow]:
    """All grid points and trials for one (seed, method, attack)."""
    rows: list[ResultRow] = []
    base = dict(environment=cfg.environment, method=method, attack=attack, p=cfg.p, seed=seed)
    try:
        ds, sigma = _seed_data(cfg, seed)
        _, pi, _ = make_environment(cfg)
        settings = cfg.settings
        fitted = fit_method(ds, method, pi, settings)
        report = influence_scores(fitted, target=cfg.target, p=cfg.p) if attack in LINE_SEARCHED else None
        prepared = (fitted, report)
    except Exception as exc:  # the sweep records the failure and moves on
        log.warning("seed %d %s/%s failed: %s", seed, method, attack, exc)
        for alpha in cfg.alphas:
            for frac in cfg.fracs:
                rows.append(ResultRow(**base, frac=frac, epsilon=math.nan, alpha=alpha, trial=0,
                                      v_org=None, v_pert=None, pct_error=None, beta=None,
                                      error=f"{type(exc).__name__}: {exc}"))
        return rows

    n_trials = cfg.trials if attack in RANDOMIZED else 1
    chained = cfg.threshold_trick and attack in LINE_SEARCHED
    for alpha in cfg.alphas:
        for trial in range(n_trials):
            prev = None  # (directional error, v_pert, beta) of the last smaller-epsilon point
            for frac in sorted(cfg.fracs):
                eps = frac * sigma
                acfg = AttackConfig(epsilon=eps, alpha=alpha, p=cfg.p, direction=cfg.direction,
                                    resolution=cfg.resolution, seed=_trial_seed(seed, trial, attack),
                                    iterations=cfg.iterations,
                                    min_threshold=prev[0] if (chained and prev) else None)
                t0 = time.perf_counter()
                try:
                    res = run_attack(attack, ds, method, cfg.target, acfg, pi, settings, prepared)
                    v_pert, beta = res.v_pert, res.beta
                    err = cfg.direction * res.pct_error
                    if chained and prev is not None and err < prev[0]:
                        # the smaller-budget perturbation is still feasible here
                        err, v_pert, beta = prev
                    if chained:
                        prev = (err, v_pert, beta)
                    rows.append(ResultRow(**base, frac=frac, epsilon=eps, alpha=alpha, trial=trial,
                                          v_org=res.v_org, v_pert=v_pert,
                                          pct_error=percent_error(res.v_org, v_pert), beta=beta,
                                          wall_time=(time.perf_counter() - t0) if cfg.record_wall_time else None))
                except Exception as exc:
                    log.warning("seed %d %s/%s frac %g failed: %s", seed, method, attack, frac, exc)
                    rows.append(ResultRow(**base, frac=frac, epsilon=eps, alpha=alpha, trial=trial,
                                          v_org=fitted.value, v_pert=None, pct_error=None, beta=None,
                                          error=f"{type(exc).__name__}: {exc}"))
    return rows


def _row_key(cfg: ExperimentConfig, row: ResultRow):
    return (cfg.methods.index(row.method), cfg.attacks.index(row.attack), row.seed,
            row.alpha, row.frac, row.trial)


def _workers() -> int:
    raw = os.environ.get("OPE_DOPE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigurationError("OPE_DOPE_THREADS must be a positive integer") from None
    return os.cpu_count() or 1


def run_sweep(cfg: ExperimentConfig, workers: int | None = None) -> list[ResultRow]:
    """Run every (seed, method, attack) cell; rows come back in a fixed order."""
    cells = [(seed, m, a) for seed in cfg.seeds for m in cfg.methods for a in cfg.attacks]
    workers = min(workers or _workers(), len(cells))
    rows: list[ResultRow] = []
    if workers <= 1:
        for cell in cells:
            rows.extend(run_cell(cfg, *cell))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_cell, cfg, *cell) for cell in cells]
            for fut in futures:
                rows.extend(fut.result())
    rows.sort(key=lambda r: _row_key(cfg, r))
    return rows


def results_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow(r.as_strings())
    return buf.getvalue()


def write_results(rows, path) -> Path:
    path = Path(path)
    path.write_text(results_to_csv(rows))
    return path


def _opt_float(s: str):
    return None if s == "" else float(s)


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(ResultRow(
                environment=rec["environment"], method=rec["method"], attack=rec["attack"],
                frac=float(rec["frac"]), epsilon=float(rec["epsilon"]), alpha=float(rec["alpha"]),
                p=_norm_value(rec["p"]), seed=int(rec["seed"]), trial=int(rec["trial"]),
                v_org=_opt_float(rec["v_org"]), v_pert=_opt_float(rec["v_pert"]),
                pct_error=_opt_float(rec["pct_error"]), beta=_opt_float(rec["beta"]),
                wall_time=_opt_float(rec.get("wall_time", "")), error=rec.get("error", "")))
    return rows


# ----------------------------------------------------------------- report


def iqm(values) -> float:
    """Mean of the values inside [P25, P75] (inclusive, linear-interpolation percentiles).

    With two distinct values no sample lies between the quartiles; the median
    is returned in that case.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("IQM of an empty sample")
    return float(_iqm_rows(x[None, :])[0])


def _iqm_rows(X: np.ndarray) -> np.ndarray:
    lo, hi = np.percentile(X, [25, 75], axis=1, keepdims=True)
    mask = (X >= lo) & (X <= hi)
    count = mask.sum(axis=1)
    total = np.where(mask, X, 0.0).sum(axis=1)
    med = np.median(X, axis=1)
    return np.divide(total, count, out=med, where=count > 0)


def bootstrap_iqm(values, B: int = 2000, seed: int = 0, level: float = 0.95):
    """Return ``(iqm, lb, ub)`` with a percentile bootstrap CI over B resamples."""
    x = np.asarray(values, dtype=np.float64)
    point = iqm(x)
    rng = np.random.default_rng(seed)
    stats = np.empty(B)
    chunk = 500
    for start in range(0, B, chunk):
        m = min(chunk, B - start)
        stats[start : start + m] = _iqm_rows(x[rng.integers(0, x.size, size=(m, x.size))])
    tail = 100.0 * (1.0 - level) / 2.0
    lb, ub = np.percentile(stats, [tail, 100.0 - tail])
    return point, float(lb), float(ub)


@dataclass(frozen=True)
class ReportRow:
    environment: str
    method: str
    attack: str
    frac: float
    alpha: float
    p: float
    n_seeds: int
    iqm: float
    lb: float
    ub: float


def report_iqm(rows, B: int = 2000, seed: int = 0, absolute: bool = False) -> list[ReportRow]:
    """Per-cell IQM and bootstrap CI of pct_error across seeds.

    Trials of randomised attacks are averaged within each seed first.
    ``absolute=True`` summarises |pct_error| instead of the signed error.
    """
    if B < 1000:
        raise ValueError("use at least 1000 bootstrap resamples")
    cells: dict[tuple, dict[int, list[float]]] = {}
    order: list[tuple] = []
    for r in rows:
        key = (r.environment, r.method, r.attack, r.frac, r.alpha, r.p)
        if key not in cells:
            cells[key] = {}
            order.append(key)
        if r.pct_error is None or r.error:
            continue
        v = abs(r.pct_error) if absolute else r.pct_error
        cells[key].setdefault(r.seed, []).append(v)
    out = []
    for key in sorted(order, key=lambda k: (k[0], k[1], k[2], k[4], k[3], k[5])):
        per_seed = cells[key]
        if not per_seed:
            log.warning("no usable rows for cell %s; skipped", key)
            continue
        vals = [float(np.mean(per_seed[s])) for s in sorted(per_seed)]
        point, lb, ub = bootstrap_iqm(vals, B, seed)
        out.append(ReportRow(*key, n_seeds=len(vals), iqm=point, lb=lb, ub=ub))
    return out


def report_to_csv(report) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in report:
        rec = asdict(r)
        w.writerow([format_norm(v) if k == "p" else (repr(v) if isinstance(v, float) else str(v))
                    for k, v in rec.items()])
    return buf.getvalue()
