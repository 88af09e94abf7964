"""``r2mdp`` command line.

Exit status: 0 success, 2 usage or configuration error, 3 inner solver
failure, 4 divergence of a fixed-point iteration.
"""
from __future__ import annotations

import argparse
import sys

from . import experiments as ex
from .errors import DivergenceError, R2MdpError, SolverError
from .mdp import load_mdp

EXIT_USAGE, EXIT_SOLVER, EXIT_DIVERGENCE = 2, 3, 4


def _floats(text: str) -> list:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override its fields")
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, help="single seed")
    seeds.add_argument("--seeds", help="inclusive seed range n..m")
    p.add_argument("--out", help="CSV output path (default: stdout)")
    p.add_argument("--solver", choices=("closed", "iterative"))
    p.add_argument("--env", help="built-in env name, MDP/layout JSON path, or random:SxA")
    p.add_argument("--alpha-r", type=float, dest="alpha_r")
    p.add_argument("--alpha-p", type=float, dest="alpha_p")
    p.add_argument("--tol", type=float)
    p.add_argument("--no-timing", action="store_true",
                   help="leave timing columns empty so reruns are byte-identical")
    p.add_argument("--quiet", action="store_true", help="no CSV on stdout, no progress text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="r2mdp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="run a planner and log residuals per iteration")
    _common(p)
    p.add_argument("--algorithm", choices=ex.PLAN_ALGORITHMS)
    p.add_argument("--m", type=int, help="evaluation sweeps per greedy step")

    p = sub.add_parser("sweep-radius", help="distance to the nominal value over radii")
    _common(p)
    p.add_argument("--grid", type=_floats, help="comma-separated radii")
    p.add_argument("--which", choices=("reward", "transition"), dest="which_radius")
    p.add_argument("--m", type=int)

    p = sub.add_parser("learn", help="tabular q-learning")
    _common(p)
    p.add_argument("--algorithm", choices=ex.LEARN_ALGORITHMS)
    p.add_argument("--steps", type=int, dest="max_steps")
    p.add_argument("--norm-mode", choices=("exact", "batch"), dest="norm_mode")

    p = sub.add_parser("robust-eval", help="returns of trained policies under more slip")
    _common(p)
    p.add_argument("--epsilons", type=_floats, dest="epsilon_grid")
    p.add_argument("--steps", type=int, dest="max_steps")
    p.add_argument("--episodes", type=int, dest="eval_episodes")

    p = sub.add_parser("validate", help="load an MDP JSON file and check its invariants")
    p.add_argument("path")
    p.add_argument("--quiet", action="store_true")
    return parser


OVERRIDES = ("env", "alpha_r", "alpha_p", "tol", "solver", "out", "algorithm", "m",
             "which_radius", "max_steps", "norm_mode", "epsilon_grid", "eval_episodes")


def config_from_args(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config) if args.config else ex.ExperimentConfig()
    changes = {k: getattr(args, k, None) for k in OVERRIDES}
    if getattr(args, "grid", None) is not None:
        changes["radius_grid"] = args.grid
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    elif args.seeds is not None:
        changes["seeds"] = ex.parse_seeds(args.seeds)
    if args.no_timing:
        changes["record_timing"] = False
    return cfg.replace(**changes)


def run(args) -> None:
    if args.command == "validate":
        mdp = load_mdp(args.path)
        if not args.quiet:
            print(f"ok: {mdp.n_states} states, {mdp.n_actions} actions, "
                  f"discount {mdp.discount}")
        return
    cfg = config_from_args(args)
    if args.command == "plan":
        _, text = ex.cmd_plan(cfg)
    elif args.command == "sweep-radius":
        _, text = ex.cmd_sweep_radius(cfg)
    elif args.command == "learn":
        _, text = ex.cmd_learn(cfg)
    else:
        _, text = ex.cmd_robust_eval(cfg)
    ex.emit(text, cfg, args.quiet)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run(args)
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (R2MdpError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
