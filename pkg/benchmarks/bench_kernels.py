"""Compiled versus pure-Python kernels.

Usage: python benchmarks/bench_kernels.py [--reps N] [--steps N] [--out results.csv]

Each row reports the median wall time of both backends and their ratio. The
outputs of the two backends are also compared so a speedup never hides a
divergence.
"""
from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from r2mdp import _fallback, kernels
from r2mdp.envs import make_env
from r2mdp.learning import LearningConfig, R2, Robust, Vanilla, q_learning
from r2mdp.robust import Iterative, UncertaintySpec

try:
    from r2mdp import _kernels as compiled
except ImportError:
    sys.exit("compiled extension not built; run: pip install -e . --no-build-isolation")


def median_ns(fn, reps):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        out = fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times)), out


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return bool(np.array_equal(a, b))


def micro_cases(rng):
    y = rng.normal(size=64)
    q = rng.normal(size=16)
    v = rng.normal(size=100)
    return [
        ("simplex_projection[64]", lambda m: m.simplex_projection(y)),
        ("pga_l2_argmax[16]", lambda m: m.pga_l2_argmax(q, 0.5, 1e-12, 10_000)),
        ("ball_min_pgd_l2[100]", lambda m: m.ball_min_pgd(v, 0.01, 2, 0.1, 1e-8, 100_000)),
        ("ball_min_pgd_l1[100]", lambda m: m.ball_min_pgd(v, 0.01, 1, 0.1, 1e-8, 100_000)),
    ]


def learning_cases(steps):
    env = make_env("mars_rover", slip=0.1)
    spec = UncertaintySpec.uniform(env.n_states, env.n_actions, "sa", 0.01, 0.01)
    cfg = LearningConfig(max_steps=steps, seed=0, log_every=steps)
    for name, variant in (("q_vanilla", Vanilla()), ("q_r2", R2(spec)),
                          ("q_robust_iterative", Robust(spec, Iterative()))):
        yield f"{name}[{steps} steps]", lambda v=variant: q_learning(env, cfg, v)[0]


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--steps", type=int, default=20_000)
    parser.add_argument("--out")
    args = parser.parse_args(argv)
    rng = np.random.default_rng(0)
    rows = []
    for name, call in micro_cases(rng):
        t_c, out_c = median_ns(lambda: call(compiled), args.reps)
        t_p, out_p = median_ns(lambda: call(_fallback), args.reps)
        rows.append((name, t_c, t_p, same(out_c, out_p)))
    original = kernels.qlearn_block
    try:
        for name, run in learning_cases(args.steps):
            kernels.qlearn_block = compiled.qlearn_block
            t_c, out_c = median_ns(run, args.reps)
            kernels.qlearn_block = _fallback.qlearn_block
            t_p, out_p = median_ns(run, 1)
            rows.append((name, t_c, t_p, same(out_c, out_p)))
    finally:
        kernels.qlearn_block = original
    fields = ("kernel", "cython_ns", "python_ns", "speedup", "identical")
    records = [dict(zip(fields, (n, int(c), int(p), round(p / c, 1), ok)))
               for n, c, p, ok in rows]
    print(f"{'kernel':34s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s} identical")
    for r in records:
        print(f"{r['kernel']:34s} {r['cython_ns'] / 1e6:10.3f} {r['python_ns'] / 1e6:10.3f} "
              f"{r['speedup']:8.1f} {r['identical']}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(records)
    return 0 if all(r["identical"] for r in records) else 1


if __name__ == "__main__":
    sys.exit(main())
