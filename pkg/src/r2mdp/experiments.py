"""Experiment harness behind the command line.

Every command takes an :class:`ExperimentConfig`, validates it before any
computation, runs one job per seed (in a process pool capped by
``R2MDP_THREADS``), merges results in seed order and returns CSV rows.
Wall times cover computation only.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .envs import GridWorld, builtin_layout, env_from_layout
from .errors import ConfigError
from .learning import (CSV_FIELDS, SCHEMA_VERSION, Batch, Exact, LearningConfig, R2, Robust,
                       Vanilla, evaluate_policy_rollouts, q_learning)
from .mdp import (TabularMdp, modified_policy_iteration, policy_evaluation, random_mdp,
                  uniform_policy)
from .r2 import AssumptionWarning, R2Config, r2_mpi, r2_policy_evaluation
from .regularizers import as_norm
from .robust import ClosedForm, Iterative, UncertaintySpec, robust_mpi, robust_policy_evaluation

PLAN_ALGORITHMS = ("vanilla-pe", "robust-pe", "r2-pe", "vanilla-mpi", "robust-mpi", "r2-mpi")
LEARN_ALGORITHMS = ("q-vanilla", "q-robust", "q-r2")

PLAN_FIELDS = ("schema_version", "seed", "algorithm", "kind", "iter", "residual",
               "wall_time_ns", "value_hash")
SWEEP_FIELDS = ("schema_version", "radius", "which_radius", "alg", "distance")
EVAL_FIELDS = ("schema_version", "variant", "epsilon", "mean_return", "std_return",
               "mean_discounted_return", "seeds")


@dataclass
class ExperimentConfig:
    """One experiment manifest; JSON keys match the field names.

    ``env`` is a built-in layout name (``maze``, ``mars_rover``), a path to an
    MDP or layout JSON file, or ``random:<states>x<actions>`` for a random
    model drawn from the seed.
    """

    env: str = "maze"
    algorithm: str = "r2-mpi"
    rectangularity: str = "sa"
    alpha_r: float = 1e-3
    alpha_p: float = 1e-5
    reward_norm: str = "l2"
    transition_norm: str = "l2"
    m: int = 1
    tol: float = 1e-3
    seeds: list = field(default_factory=lambda: [0])
    solver: str = "closed"
    solver_step: float = 0.1
    solver_tol: float = 1e-8
    epsilon: float = 1e-3
    slip: float | None = None
    radius_grid: list = field(default_factory=lambda: np.logspace(-9, -2, 8).tolist())
    which_radius: str = "reward"
    max_steps: int = 200_000
    log_every: int = 1000
    exploring_starts: bool = False
    norm_mode: str = "exact"
    batch_size: int = 128
    batch_beta: float = 0.1
    variants: list = field(default_factory=lambda: ["q-vanilla", "q-r2"])
    epsilon_grid: list = field(default_factory=lambda: [0.0, 0.2, 0.4, 0.6, 0.8])
    eval_episodes: int = 1000
    record_timing: bool = True
    out: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def validate(self, command: str) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.rectangularity in ("s", "sa"), "rectangularity must be 's' or 'sa'")
        need(self.alpha_r >= 0 and self.alpha_p >= 0, "radii must be non-negative")
        for name in ("reward_norm", "transition_norm"):
            try:
                as_norm(getattr(self, name))
            except Exception:
                raise ConfigError(f"{name} must be l1, l2 or linf") from None
        need(self.m >= 1, "m must be >= 1")
        need(self.tol > 0, "tol must be positive")
        need(len(self.seeds) >= 1 and all(isinstance(s, int) and s >= 0 for s in self.seeds),
             "seeds must be a non-empty list of non-negative integers")
        need(self.solver in ("closed", "iterative"), "solver must be closed or iterative")
        need(self.solver_step > 0 and self.solver_tol > 0, "solver step and tol must be > 0")
        need(self.slip is None or 0.0 <= self.slip <= 1.0, "slip must lie in [0, 1]")
        need(self.norm_mode in ("exact", "batch"), "norm_mode must be exact or batch")
        need(self.max_steps >= 1 and self.log_every >= 1, "step counts must be >= 1")
        need(self.eval_episodes >= 1, "eval_episodes must be >= 1")
        if command == "plan":
            need(self.algorithm in PLAN_ALGORITHMS,
                 f"plan algorithm must be one of {', '.join(PLAN_ALGORITHMS)}")
        if command == "sweep-radius":
            need(self.which_radius in ("reward", "transition"),
                 "which_radius must be reward or transition")
            need(len(self.radius_grid) >= 1 and all(r >= 0 for r in self.radius_grid),
                 "radius_grid must hold non-negative radii")
        if command == "learn":
            need(self.algorithm in LEARN_ALGORITHMS,
                 f"learn algorithm must be one of {', '.join(LEARN_ALGORITHMS)}")
        if command == "robust-eval":
            need(len(self.variants) >= 1 and all(v in LEARN_ALGORITHMS for v in self.variants),
                 f"variants must be drawn from {', '.join(LEARN_ALGORITHMS)}")
            need(all(0.0 <= e <= 1.0 for e in self.epsilon_grid), "epsilons must lie in [0, 1]")
        if command in ("learn", "robust-eval"):
            need(self.rectangularity == "sa", "learning supports (s,a)-rectangular sets only")
            need(not self.env.startswith("random:"), "learning needs a grid environment")
        _ = self.solver_obj
        return self

    @property
    def solver_obj(self):
        if self.solver == "closed":
            return ClosedForm()
        return Iterative(step=self.solver_step, tol=self.solver_tol)


# ---------------------------------------------------------------------------
# building blocks


def parse_seeds(text: str) -> list:
    """``"3"`` or ``"0..4"`` (inclusive) to a list of seeds."""
    try:
        if ".." in text:
            lo, hi = (int(x) for x in text.split("..", 1))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(text)]
    except ValueError:
        raise ConfigError(f"bad seed range {text!r}; use n or n..m") from None


def load_source(cfg: ExperimentConfig, seed: int = 0):
    """``(mdp, env)``; ``env`` is ``None`` for raw MDP sources."""
    name = cfg.env
    if name.startswith("random:"):
        try:
            n_s, n_a = (int(x) for x in name[len("random:"):].split("x"))
        except ValueError:
            raise ConfigError("random sources look like random:<states>x<actions>") from None
        return random_mdp(np.random.default_rng(seed), n_s, n_a), None
    if name.endswith(".json"):
        try:
            d = json.loads(Path(name).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read {name}: {exc}") from None
        if "transition" in d:
            return TabularMdp.from_dict(d), None
        env = env_from_layout(d)
    else:
        env = builtin_layout(name)
    if cfg.slip is not None:
        env = env.perturb(cfg.slip)
    return env.to_tabular_mdp(), env


def make_spec(cfg: ExperimentConfig, mdp: TabularMdp, alpha_r=None, alpha_p=None):
    return UncertaintySpec.uniform(
        mdp.n_states, mdp.n_actions, cfg.rectangularity,
        cfg.alpha_r if alpha_r is None else alpha_r,
        cfg.alpha_p if alpha_p is None else alpha_p,
        as_norm(cfg.reward_norm), as_norm(cfg.transition_norm))


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def value_hash(v) -> str:
    return hashlib.sha256(np.ascontiguousarray(v, dtype=float).tobytes()).hexdigest()[:16]


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("R2MDP_THREADS")
    try:
        limit = int(cap) if cap else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError("R2MDP_THREADS must be an integer") from None
    return max(1, min(limit, n_jobs))


def run_seeds(fn, cfg: ExperimentConfig, seeds) -> list:
    """``[fn(cfg, seed) for seed in seeds]``, in a pool when allowed."""
    seeds = list(seeds)
    workers = worker_count(len(seeds))
    if workers == 1:
        return [fn(cfg, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(seeds), seeds))


def write_csv(rows, fields, out=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    text = buf.getvalue()
    if out is not None:
        Path(out).write_text(text)
    return text


def write_meta(out, cfg: ExperimentConfig, summary: dict) -> None:
    """Sidecar ``<out>.meta.json`` holding provenance and timing summaries."""
    if out is None:
        return
    meta = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(),
            "config_hash": cfg.config_hash, "git_describe": git_describe(),
            "backend": kernels.BACKEND, "summary": summary}
    Path(str(out) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# planning


@dataclass
class PlanRecord:
    seed: int
    algorithm: str
    residuals: list
    wall_time_ns: list
    value: np.ndarray
    policy: np.ndarray | None
    total_ns: int
    config_hash: str
    git_describe: str = ""

    @property
    def n_iter(self) -> int:
        return len(self.residuals)


def run_planner(mdp: TabularMdp, cfg: ExperimentConfig, algorithm: str, trace: list):
    """Run one planner; returns ``(value, policy)``."""
    spec = make_spec(cfg, mdp)
    solver = cfg.solver_obj
    kind, _, mode = algorithm.partition("-")
    if mode == "pe":
        pi = uniform_policy(mdp)
        if kind == "vanilla":
            return policy_evaluation(mdp, pi, cfg.tol, trace=trace), pi
        if kind == "robust":
            return robust_policy_evaluation(mdp, spec, pi, cfg.tol, solver, trace=trace), pi
        return r2_policy_evaluation(mdp, R2Config(spec, cfg.epsilon), pi, cfg.tol,
                                    trace=trace), pi
    if kind == "vanilla":
        pol, v, _ = modified_policy_iteration(mdp, cfg.m, cfg.tol, trace=trace)
    elif kind == "robust":
        pol, v, _ = robust_mpi(mdp, spec, cfg.m, cfg.tol, solver, trace=trace)
    else:
        pol, v, _ = r2_mpi(mdp, R2Config(spec, cfg.epsilon), cfg.m, cfg.tol, trace=trace)
    return v, pol


def _plan_one(cfg: ExperimentConfig, seed: int) -> PlanRecord:
    mdp, _ = load_source(cfg, seed)
    trace = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssumptionWarning)
        t0 = time.perf_counter_ns()
        v, pol = run_planner(mdp, cfg, cfg.algorithm, trace)
        total = time.perf_counter_ns() - t0
    return PlanRecord(seed, cfg.algorithm, [r for r, _ in trace],
                      [t - t0 for _, t in trace], v, pol, total, cfg.config_hash)


def plan_rows(records, record_timing: bool = True):
    for rec in records:
        for i, (res, t) in enumerate(zip(rec.residuals, rec.wall_time_ns), start=1):
            yield {"schema_version": SCHEMA_VERSION, "seed": rec.seed,
                   "algorithm": rec.algorithm, "kind": "iter", "iter": i, "residual": res,
                   "wall_time_ns": t if record_timing else "", "value_hash": ""}
        yield {"schema_version": SCHEMA_VERSION, "seed": rec.seed, "algorithm": rec.algorithm,
               "kind": "summary", "iter": rec.n_iter, "residual": rec.residuals[-1],
               "wall_time_ns": rec.total_ns if record_timing else "",
               "value_hash": value_hash(rec.value)}


def cmd_plan(cfg: ExperimentConfig):
    """Run a planner once per seed; returns ``(records, csv_text)``."""
    cfg.validate("plan")
    load_source(cfg, cfg.seeds[0])
    records = run_seeds(_plan_one, cfg, cfg.seeds)
    describe = git_describe()
    for rec in records:
        rec.git_describe = describe
    text = write_csv(plan_rows(records, cfg.record_timing), PLAN_FIELDS, cfg.out)
    totals = [r.total_ns for r in records]
    write_meta(cfg.out, cfg, {"total_ns_mean": float(np.mean(totals)),
                              "total_ns_std": float(np.std(totals)),
                              "n_iter": [r.n_iter for r in records]})
    return records, text


# ---------------------------------------------------------------------------
# radius sweeps


def _sweep_one(cfg: ExperimentConfig, seed: int) -> list:
    mdp, _ = load_source(cfg, seed)
    _, v_van, _ = modified_policy_iteration(mdp, cfg.m, cfg.tol)
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssumptionWarning)
        for radius in cfg.radius_grid:
            ar, ap = (radius, 0.0) if cfg.which_radius == "reward" else (0.0, radius)
            spec = make_spec(cfg, mdp, ar, ap)
            _, v_rob, _ = robust_mpi(mdp, spec, cfg.m, cfg.tol, cfg.solver_obj)
            _, v_r2, _ = r2_mpi(mdp, R2Config(spec, cfg.epsilon), cfg.m, cfg.tol)
            for alg, v in (("robust", v_rob), ("r2", v_r2)):
                rows.append({"schema_version": SCHEMA_VERSION, "radius": radius,
                             "which_radius": cfg.which_radius, "alg": alg,
                             "distance": float(np.linalg.norm(v - v_van))})
    return rows


def cmd_sweep_radius(cfg: ExperimentConfig, radius_grid=None):
    """Distance of robust and R2 optimal values to the nominal one, per radius."""
    if radius_grid is not None:
        cfg = cfg.replace(radius_grid=list(radius_grid))
    cfg.validate("sweep-radius")
    load_source(cfg, cfg.seeds[0])
    rows = run_seeds(_sweep_one, cfg, cfg.seeds[:1])[0]
    return rows, write_csv(rows, SWEEP_FIELDS, cfg.out)


# ---------------------------------------------------------------------------
# learning


def make_variant(cfg: ExperimentConfig, env, algorithm: str):
    if algorithm == "q-vanilla":
        return Vanilla()
    spec = make_spec(cfg, env.to_tabular_mdp())
    if algorithm == "q-r2":
        return R2(spec)
    return Robust(spec, cfg.solver_obj)


def learning_config(cfg: ExperimentConfig, seed: int) -> LearningConfig:
    mode = (Exact() if cfg.norm_mode == "exact"
            else Batch(batch_size=cfg.batch_size, beta=cfg.batch_beta))
    return LearningConfig(max_steps=cfg.max_steps, seed=seed, norm_mode=mode,
                          log_every=cfg.log_every, exploring_starts=cfg.exploring_starts)


def _learn_one(cfg: ExperimentConfig, seed: int):
    _, env = load_source(cfg, seed)
    return q_learning(env, learning_config(cfg, seed), make_variant(cfg, env, cfg.algorithm))


def _require_env(cfg):
    _, env = load_source(cfg, cfg.seeds[0])
    if not isinstance(env, GridWorld):
        raise ConfigError("learning needs a grid environment, not a raw MDP file")
    return env


def cmd_learn(cfg: ExperimentConfig):
    """q-learning per seed; returns ``(results, csv_text)`` with ``(q, RunRecord)`` results."""
    cfg.validate("learn")
    _require_env(cfg)
    results = run_seeds(_learn_one, cfg, cfg.seeds)
    rows = []
    for _, rec in results:
        for row in rec.rows():
            if not cfg.record_timing:
                row.update(wall_time_ns="", update_ns="")
            rows.append(row)
    text = write_csv(rows, CSV_FIELDS, cfg.out)
    write_meta(cfg.out, cfg, {
        "median_update_ns": [rec.median_update_ns for _, rec in results],
        "final_return": [rec.returns[-1] for _, rec in results],
        "solver_failures": [rec.solver_failures for _, rec in results]})
    return results, text


# ---------------------------------------------------------------------------
# robustness evaluation


def _eval_one(cfg: ExperimentConfig, seed: int) -> dict:
    """Train every variant on the nominal env, then roll out on perturbed ones.

    All variants are scored with the same rollout seed per epsilon so they
    face identical noise.
    """
    _, env = load_source(cfg, seed)
    lcfg = learning_config(cfg, seed)
    out = {}
    for algorithm in cfg.variants:
        q, _ = q_learning(env, lcfg, make_variant(cfg, env, algorithm))
        out[algorithm] = [evaluate_policy_rollouts(env.perturb(eps), q, cfg.eval_episodes,
                                                   seed=10_000 * (seed + 1) + i)
                          for i, eps in enumerate(cfg.epsilon_grid)]
    return out


def cmd_robust_eval(cfg: ExperimentConfig, epsilon_grid=None):
    """Mean and pooled std of returns per variant and slip probability."""
    if epsilon_grid is not None:
        cfg = cfg.replace(epsilon_grid=list(epsilon_grid))
    cfg.validate("robust-eval")
    _require_env(cfg)
    per_seed = run_seeds(_eval_one, cfg, cfg.seeds)
    rows = []
    for algorithm in cfg.variants:
        for i, eps in enumerate(cfg.epsilon_grid):
            stats = [res[algorithm][i] for res in per_seed]
            means = np.array([s.mean for s in stats])
            second = np.array([s.std ** 2 + s.mean ** 2 for s in stats])
            mean = float(means.mean())
            rows.append({"schema_version": SCHEMA_VERSION, "variant": algorithm,
                         "epsilon": eps, "mean_return": mean,
                         "std_return": math.sqrt(max(float(second.mean()) - mean ** 2, 0.0)),
                         "mean_discounted_return": float(np.mean([s.mean_discounted
                                                                  for s in stats])),
                         "seeds": len(stats)})
    return rows, write_csv(rows, EVAL_FIELDS, cfg.out)


def emit(text: str, cfg: ExperimentConfig, quiet: bool = False) -> None:
    """Print CSV to stdout unless it went to a file."""
    if cfg.out is None and not quiet:
        sys.stdout.write(text)
