"""Replicated screening experiments: configs, presets, trials, aggregation, sweeps."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .data_io import Dataset, SchemaConfig, load_dataset
from .engine import Policy, Trace, mining_regret, optimization_regret, run_sequential
from .gp_core import KernelSpec
from .parallel import simulate_parallel
from .score_models import CovariateModel, MultiFidelityModel, RefitConfig, SingleTestModel
from .synth import EXPENSIVE_AMPLITUDE, EXPENSIVE_NOISE, SynthConfig, expensive_spec, generate_problem, true_model

logger = logging.getLogger(__name__)

MAX_WORKERS_ENV = "SCREENBO_MAX_WORKERS"

METHODS = {
    "SGEI": ("ei", "greedy"),
    "SGT": ("threshold", "greedy"),
    "SGM": ("mining", "greedy"),
    "STR": ("thompson", "random"),
    "GT-Poor": ("threshold", "single"),
    "GT-Rich": ("threshold", "single"),
    "T-Poor": ("thompson", "single"),
    "T-Rich": ("thompson", "single"),
}

METRICS = ("optimization_regret", "mining_regret", "cheap_tests", "expensive_tests", "total_cost", "total_reward")
UNSWEEPABLE = {"name", "output", "trace_dir", "jobs", "seeds", "trials"}


class ConfigError(ValueError):
    """An experiment configuration is invalid."""


@dataclass
class ExperimentConfig:
    method: str = "SGT"
    name: str = ""
    # synthetic problem (used when ``data`` is empty)
    n: int = 200
    theta: float = math.pi / 4
    # real data
    data: Optional[str] = None
    schema: Optional[str] = None
    model: str = "covariate"
    budget: float = 50.0
    c_cheap: float = 0.2
    c_expensive: float = 1.0
    N: int = 10
    workers: int = 1
    trials: int = 10
    seed: int = 0
    seeds: Optional[list[int]] = None
    p1: Optional[float] = None
    init_random: Optional[int] = None
    refit_every: Optional[int] = None
    m_acquisition: int = 512
    m_threshold: int = 4096
    m_outer: int = 512
    m_outer_mining: int = 8
    threshold_refresh: int = 10
    pool_size: int = 5000
    max_joint: int = 1000
    rank_joint: int = 100
    output: Optional[str] = None
    trace_dir: Optional[str] = None
    jobs: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.model not in ("covariate", "multi_fidelity"):
            raise ConfigError(f"unknown model {self.model!r}")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.seeds is not None:
            self.seeds = [int(s) for s in self.seeds]
            if len(self.seeds) != self.trials:
                raise ConfigError(f"{len(self.seeds)} seeds given for {self.trials} trials")
            if len(set(self.seeds)) != len(self.seeds):
                raise ConfigError("seeds must be distinct")
        if self.data and not self.schema:
            raise ConfigError("a dataset needs a schema file")

    @property
    def seed_list(self) -> list[int]:
        return self.seeds if self.seeds is not None else [self.seed + r for r in range(self.trials)]

    @property
    def is_single_test(self) -> bool:
        return METHODS[self.method][1] == "single"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    def updated(self, **changes) -> "ExperimentConfig":
        bad = set(changes) - {f.name for f in fields(self)}
        if bad:
            raise ConfigError(f"unknown config keys: {sorted(bad)}")
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

THETA_GRID = [0.0, math.pi / 8, math.pi / 4, 3 * math.pi / 8, math.pi / 2]

_SYNTH_FULL = dict(n=500, trials=1000, budget=50.0, c_expensive=1.0, N=10)
_SYNTH_DESK = dict(n=200, trials=100, budget=50.0, c_expensive=1.0, N=10, m_threshold=1024)

PRESETS: dict[str, tuple[dict, dict]] = {
    # name: (base config, sweep grid)
    "exp1": ({**_SYNTH_FULL, "c_cheap": 0.2, "workers": 1}, {"theta": THETA_GRID}),
    "exp2": ({**_SYNTH_FULL, "theta": math.pi / 4, "workers": 1}, {"c_cheap": [0.1, 0.2, 0.3, 0.4, 0.5]}),
    "exp3": ({**_SYNTH_FULL, "theta": math.pi / 4, "c_cheap": 1.0}, {"workers": [1, 2, 4, 8, 16]}),
    "p1": ({**_SYNTH_FULL, "theta": math.pi / 4, "c_cheap": 0.2, "workers": 1, "method": "STR"},
           {"p1": [0.5, 0.6, 0.7, 0.8, 0.875, 0.9, 0.95]}),
    "exp1-desk": ({**_SYNTH_DESK, "c_cheap": 0.2, "workers": 1}, {"theta": [0.0, math.pi / 4, math.pi / 2]}),
    "exp2-desk": ({**_SYNTH_DESK, "theta": math.pi / 4, "workers": 1}, {"c_cheap": [0.1, 0.3, 0.5]}),
    "exp3-desk": ({**_SYNTH_DESK, "theta": math.pi / 4, "c_cheap": 1.0}, {"workers": [1, 4, 16]}),
    "cof": ({"budget": 1000.0, "c_cheap": 0.1, "c_expensive": 1.0, "N": 100, "trials": 10,
             "refit_every": 10, "method": "SGT"}, {}),
    "cof-desk": ({"budget": 100.0, "c_cheap": 0.1, "c_expensive": 1.0, "N": 100, "trials": 5,
                  "refit_every": 10, "method": "SGT", "m_threshold": 1024}, {}),
    "mof": ({"budget": 1000.0, "c_cheap": 0.5, "c_expensive": 0.5, "N": 100, "trials": 10,
             "refit_every": 10, "method": "SGT"}, {}),
    "mof-desk": ({"budget": 100.0, "c_cheap": 0.5, "c_expensive": 0.5, "N": 100, "trials": 5,
                  "refit_every": 10, "method": "SGT", "m_threshold": 1024}, {}),
}


def preset(name: str, **overrides) -> tuple[ExperimentConfig, dict]:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    base, grid = PRESETS[name]
    return ExperimentConfig.from_dict({**base, **overrides}), dict(grid)


# ---------------------------------------------------------------------------
# building policies
# ---------------------------------------------------------------------------


def _default_spec(d: int, y: np.ndarray | None = None) -> KernelSpec:
    v = float(np.var(y)) if y is not None and y.size > 1 else 1.0
    v = v if v > 0 else 1.0
    return KernelSpec(v, (1.0,) * d, 0.1 * v)


def build_model(cfg: ExperimentConfig, data: Dataset, synth: SynthConfig | None):
    """The score model handed to the policy.

    Synthetic problems get the true generating model; real data get broad
    initial hyperparameters which the refit schedule then adapts.
    """
    d = data.d
    single = cfg.is_single_test
    rich = cfg.method.endswith("Rich")
    if synth is not None:
        model = true_model(synth)
        if single:
            if rich:
                return SingleTestModel(expensive_spec(synth.theta), use_cheap=True)
            # the expensive score is not a GP over x alone; start from the
            # x-lengthscale and let refitting adapt
            ls = expensive_spec(synth.theta).lengthscales[0]
            return SingleTestModel(KernelSpec(EXPENSIVE_AMPLITUDE, (min(ls, 1.0),), EXPENSIVE_NOISE))
        if cfg.model == "multi_fidelity":
            return MultiFidelityModel(model.f_spec.replace(noise_variance=0.0), model.sigma_C, model.sigma_E)
        return model
    if single:
        return SingleTestModel(_default_spec(d + rich, data.expensive), use_cheap=rich)
    if cfg.model == "multi_fidelity":
        spec = _default_spec(d, data.cheap)
        return MultiFidelityModel(spec.replace(noise_variance=0.0), math.sqrt(spec.noise_variance),
                                  math.sqrt(spec.noise_variance))
    return CovariateModel(_default_spec(d, data.cheap), _default_spec(d + 1, data.expensive))


def build_policy(cfg: ExperimentConfig, model) -> Policy:
    acq, ctl = METHODS[cfg.method]
    refit_every = cfg.refit_every
    return Policy(
        acquisition=acq, controller=ctl, model=model, N=cfg.N, p1=cfg.p1,
        init_random=cfg.init_random, refit_every=refit_every, refit_config=RefitConfig(),
        m_acquisition=cfg.m_acquisition, m_threshold=cfg.m_threshold, m_outer=cfg.m_outer,
        m_outer_mining=cfg.m_outer_mining, threshold_refresh=cfg.threshold_refresh,
        pool_size=cfg.pool_size, max_joint=cfg.max_joint, rank_joint=cfg.rank_joint,
    )


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------


def _load_real(cfg: ExperimentConfig) -> Dataset:
    return load_dataset(cfg.data, SchemaConfig.load(cfg.schema))


def run_trial(cfg: ExperimentConfig, trial: int, seed: int, data: Dataset | None = None) -> dict:
    """One independent screen; returns a flat result row."""
    synth = None
    if cfg.data:
        data = data if data is not None else _load_real(cfg)
    else:
        synth = SynthConfig(n=cfg.n, theta=cfg.theta, seed=seed)
        data = generate_problem(synth)
    policy = build_policy(cfg, build_model(cfg, data, synth))
    policy_seed = int(np.random.SeedSequence([seed, 1]).generate_state(1)[0])
    c_e = cfg.c_expensive
    if cfg.is_single_test and cfg.schema:
        override = SchemaConfig.load(cfg.schema).single_test_c_expensive
        c_e = override if override is not None else c_e
    if cfg.workers == 1:
        trace = run_sequential(data, policy, cfg.budget, cfg.c_cheap, c_e, seed=policy_seed)
    else:
        trace = simulate_parallel(data, policy, cfg.budget, cfg.c_cheap, c_e, workers=cfg.workers, seed=policy_seed)
    if cfg.trace_dir:
        Path(cfg.trace_dir).mkdir(parents=True, exist_ok=True)
        trace.write_csv(Path(cfg.trace_dir) / f"trace_{trial:04d}.csv", timed=cfg.workers > 1)
    return trial_row(trial, seed, trace, data, cfg.N)


def trial_row(trial: int, seed: int, trace: Trace, data: Dataset, N: int) -> dict:
    return {
        "trial": trial,
        "seed": seed,
        "optimization_regret": optimization_regret(trace, data),
        "mining_regret": mining_regret(trace, data, N),
        "cheap_tests": trace.n_cheap,
        "expensive_tests": trace.n_expensive,
        "total_cost": trace.total_cost,
        "total_reward": trace.total_reward_mining,
    }


def aggregate(rows: list[dict]) -> dict[str, dict[str, float]]:
    """Mean and standard error (sample sd / sqrt(R)) of every metric."""
    out = {"mean": {}, "se": {}}
    R = len(rows)
    for m in METRICS:
        v = np.array([r[m] for r in rows], dtype=float)
        out["mean"][m] = float(v.mean())
        out["se"][m] = float(v.std(ddof=1) / math.sqrt(R)) if R > 1 else 0.0
    return out


def _parallelism(cfg: ExperimentConfig) -> int:
    cap = os.environ.get(MAX_WORKERS_ENV)
    jobs = cfg.jobs
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"{MAX_WORKERS_ENV} must be an integer, got {cap!r}") from None
    return max(1, jobs)


def _trial_job(args):
    cfg, trial, seed = args
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return run_trial(cfg, trial, seed)
    with threadpool_limits(1):
        return run_trial(cfg, trial, seed)


def run_trials(cfg: ExperimentConfig) -> list[dict]:
    seeds = cfg.seed_list
    jobs = _parallelism(cfg)
    if jobs == 1:
        data = _load_real(cfg) if cfg.data else None
        return [run_trial(cfg, r, s, data) for r, s in enumerate(seeds)]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_trial_job, [(cfg, r, s) for r, s in enumerate(seeds)]))


def _echo(cfg: ExperimentConfig) -> dict:
    return {
        "method": cfg.method,
        "source": cfg.data or "synthetic",
        "n": "" if cfg.data else cfg.n,
        "theta": "" if cfg.data else cfg.theta,
        "workers": cfg.workers,
        "budget": cfg.budget,
        "c_cheap": cfg.c_cheap,
        "c_expensive": cfg.c_expensive,
        "N": cfg.N,
        "p1": "" if cfg.p1 is None else cfg.p1,
    }


def _fmt(v: Any) -> Any:
    return repr(v) if isinstance(v, float) else v


RESULT_COLUMNS = ["row_type", *(_echo(ExperimentConfig()).keys()), "trial", "seed", *METRICS]


def write_results(path, cfg: ExperimentConfig, rows: list[dict], agg: dict) -> None:
    echo = _echo(cfg)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(v) for k, v in {"row_type": "trial", **echo, **r}.items()})
        for kind in ("mean", "se"):
            w.writerow({k: _fmt(v) for k, v in {"row_type": kind, **echo, "trial": "", "seed": "", **agg[kind]}.items()})


def run_experiment(cfg: ExperimentConfig, output=None) -> dict:
    """Run all trials, write the result CSV, and return the aggregates."""
    rows = run_trials(cfg)
    agg = aggregate(rows)
    path = output or cfg.output
    if path:
        write_results(path, cfg, rows, agg)
    return {"config": _echo(cfg), "rows": rows, **agg}


def expand_grid(grid: dict[str, list]) -> list[dict]:
    if not grid:
        return [{}]
    keys = list(grid)
    for k in keys:
        if k in UNSWEEPABLE:
            raise ConfigError(f"{k!r} cannot be swept")
        if k not in {f.name for f in fields(ExperimentConfig)}:
            raise ConfigError(f"unknown sweep parameter {k!r}")
        if not isinstance(grid[k], (list, tuple)) or not grid[k]:
            raise ConfigError(f"sweep values for {k!r} must be a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _point_name(point: dict) -> str:
    if not point:
        return "point"
    return "_".join(f"{k}-{v:.6g}" if isinstance(v, float) else f"{k}-{v}" for k, v in point.items())


SUMMARY_COLUMNS = ["point", *RESULT_COLUMNS[1:-len(METRICS) - 2], *(f"{m}_mean" for m in METRICS),
                   *(f"{m}_se" for m in METRICS), "file"]


def sweep(base: ExperimentConfig, grid: dict[str, list], out_dir, methods: list[str] | None = None) -> list[dict]:
    """Cartesian sweep of ``grid`` (optionally times ``methods``).

    Writes one result CSV per point and ``summary.csv`` with one row per point.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    points = expand_grid(grid)
    method_list = methods or [base.method]
    summary = []
    for method in method_list:
        for point in points:
            cfg = base.updated(method=method, **point)
            label = f"{method}_{_point_name(point)}"
            path = out_dir / f"{label}.csv"
            res = run_experiment(cfg, path)
            row = {"point": label, **res["config"]}
            row.update({f"{m}_mean": res["mean"][m] for m in METRICS})
            row.update({f"{m}_se": res["se"][m] for m in METRICS})
            row["file"] = path.name
            summary.append(row)
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in summary:
            w.writerow({k: _fmt(v) for k, v in row.items()})
    return summary
