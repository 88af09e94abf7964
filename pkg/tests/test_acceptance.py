"""End-to-end acceptance checks; each prints one PASS/FAIL line.

Run ``python tests/test_acceptance.py`` for the summary alone, or through
pytest where each check is also an assertion.
"""
import time
import warnings

import numpy as np
import pytest

from r2mdp import experiments as ex
from r2mdp.envs import make_env
from r2mdp.learning import (NormEstimator, R2, ReplayBuffer, Robust, LearningConfig,
                            batch_norm_update, exact_v_norm, q_learning, r2_optimal_q)
from r2mdp.mdp import (modified_policy_iteration, policy_evaluation, q_from_v, random_mdp,
                       uniform_policy)
from r2mdp.r2 import (AssumptionWarning, R2Config, check_assumption_1, r2_bellman_eval_apply,
                      r2_mpi, r2_policy_evaluation, r2_q_evaluation, reward_robust_ascent,
                      reward_robust_objective, reward_robust_policy_gradient)
from r2mdp.regularizers import (KL, Shannon, Tsallis, conjugate_gradient, conjugate_value,
                                reg_value, simplex_projection, support_entropy_set)
from r2mdp.robust import (ClosedForm, Iterative, UncertaintySpec, robust_mpi,
                          robust_policy_evaluation)

MAZE_RADII = (1e-3, 1e-5)
MAZE_TOL = 1e-3


def admissible_spec(rng, mdp, rect):
    probe = check_assumption_1(mdp, R2Config(UncertaintySpec.uniform(
        mdp.n_states, mdp.n_actions, rect)))
    shape = (mdp.n_states,) if rect == "s" else (mdp.n_states, mdp.n_actions)
    cap = probe.bound if rect == "s" else probe.bound[:, None]
    return UncertaintySpec(rect, rng.uniform(0, 0.5, shape), cap * rng.uniform(0, 1, shape))


def maze_setup():
    mdp = make_env("maze").to_tabular_mdp()
    spec = UncertaintySpec.uniform(mdp.n_states, mdp.n_actions, "sa", *MAZE_RADII)
    return mdp, spec


def quiet(fn, *args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AssumptionWarning)
        return fn(*args, **kw)


def median_time(fn, reps=5):
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def check_equivalence():
    t0 = time.perf_counter()
    mdp, spec = maze_setup()
    pi = uniform_policy(mdp)
    v_r2 = quiet(r2_policy_evaluation, mdp, R2Config(spec), pi, MAZE_TOL)
    v_cf = robust_policy_evaluation(mdp, spec, pi, MAZE_TOL, ClosedForm())
    v_it = robust_policy_evaluation(mdp, spec, pi, MAZE_TOL, Iterative(tol=1e-8))
    elapsed = time.perf_counter() - t0
    d_cf, d_it = np.max(np.abs(v_r2 - v_cf)), np.max(np.abs(v_r2 - v_it))
    ok = d_cf <= 1e-8 and d_it <= 1e-4 and elapsed < 5
    return ok, f"|r2-closed|={d_cf:.1e} |r2-iterative|={d_it:.1e} time={elapsed:.2f}s"


def check_planning_speed():
    mdp, spec = maze_setup()
    cfg = R2Config(spec)
    pi = uniform_policy(mdp)
    it = Iterative(tol=1e-8)
    runs = {
        "pe": (lambda: policy_evaluation(mdp, pi, MAZE_TOL),
               lambda: quiet(r2_policy_evaluation, mdp, cfg, pi, MAZE_TOL),
               lambda: robust_policy_evaluation(mdp, spec, pi, MAZE_TOL, it)),
    }
    for m in (1, 4):
        runs[f"mpi{m}"] = (lambda m=m: modified_policy_iteration(mdp, m, MAZE_TOL),
                           lambda m=m: quiet(r2_mpi, mdp, cfg, m, MAZE_TOL),
                           lambda m=m: robust_mpi(mdp, spec, m, MAZE_TOL, it))
    ok, parts = True, []
    for name, (van, r2, rob) in runs.items():
        t_van, t_r2 = median_time(van, 21), median_time(r2, 21)
        t_rob = median_time(rob, 3)
        rob_ratio, r2_ratio = t_rob / t_r2, t_r2 / t_van
        ok &= rob_ratio >= 10 and r2_ratio <= 10
        parts.append(f"{name}: robust/r2={rob_ratio:.0f}x r2/vanilla={r2_ratio:.1f}x")
    return ok, "; ".join(parts)


def check_radius_sweeps():
    grid = np.logspace(-9, -2, 8)
    cfg = ex.ExperimentConfig(env="maze", tol=1e-10)
    ok, parts = True, []
    for which in ("reward", "transition"):
        rows, _ = ex.cmd_sweep_radius(cfg.replace(which_radius=which), grid)
        d = {alg: np.array([r["distance"] for r in rows if r["alg"] == alg])
             for alg in ("robust", "r2")}
        mono = bool(np.all(np.diff(d["r2"]) >= 0))
        ok &= mono and d["r2"][0] <= 1e-6
        part = f"{which}: monotone={mono} d(1e-9)={d['r2'][0]:.1e}"
        if which == "reward":
            gap = np.max(np.abs(d["r2"] - d["robust"]))
            ok &= gap <= 1e-8
            part += f" |robust-r2|={gap:.1e}"
        parts.append(part)
    return ok, "; ".join(parts)


def check_operator_properties():
    rng = np.random.default_rng(2024)
    bad = {"contraction": 0, "monotone": 0, "shift": 0}
    for k in range(5):
        mdp = random_mdp(rng, 5, 3)
        cfg = R2Config(admissible_spec(rng, mdp, "s" if k % 2 else "sa"))
        rep = check_assumption_1(mdp, cfg)
        assert rep.all_hold
        pi = rng.dirichlet(np.ones(3), size=5)
        T = lambda v: r2_bellman_eval_apply(mdp, cfg, pi, v)  # noqa: E731
        for _ in range(200):
            v1, v2 = rng.normal(size=(2, 5)) * 5
            c = float(rng.uniform(-5, 5))
            t1 = T(v1)
            if np.max(np.abs(t1 - T(v2))) > rep.contraction * np.max(np.abs(v1 - v2)) + 1e-12:
                bad["contraction"] += 1
            if np.any(t1 > T(v1 + np.abs(v2)) + 1e-12):
                bad["monotone"] += 1
            if np.any(T(v1 + c) > t1 + mdp.discount * c + 1e-12):
                bad["shift"] += 1
    ok = not any(bad.values())
    return ok, "violations over 1000 triples: " + " ".join(f"{k}={n}" for k, n in bad.items())


def check_optimal_dominates():
    rng = np.random.default_rng(7)
    worst = -np.inf
    for k in range(5):
        mdp = random_mdp(rng, 5, 3)
        cfg = R2Config(admissible_spec(rng, mdp, "s" if k % 2 else "sa"))
        _, v_star, _ = r2_mpi(mdp, cfg, 1, 1e-12)
        for _ in range(100):
            pi = rng.dirichlet(np.ones(3), size=5)
            v = r2_policy_evaluation(mdp, cfg, pi, 1e-12)
            worst = max(worst, float(np.max(v - v_star)))
    return worst <= 1e-8, f"max(v_pi - v_star)={worst:.1e} over 500 policies"


def check_q_identity():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(20):
        mdp = random_mdp(rng, 4, 3)
        spec = admissible_spec(rng, mdp, "sa")
        cfg = R2Config(spec)
        pi = rng.dirichlet(np.ones(3), size=4)
        v = r2_policy_evaluation(mdp, cfg, pi, 1e-14)
        q_u = r2_q_evaluation(mdp, cfg, pi, 1e-14)
        rhs = (q_from_v(mdp, v) - spec.reward_radius
               - mdp.discount * np.linalg.norm(v) * spec.transition_radius)
        worst = max(worst, float(np.max(np.abs(q_u - rhs))))
    return worst <= 1e-9, f"max error={worst:.1e} over 20 instances"


def check_q_learning():
    env = make_env("mars_rover")
    spec = UncertaintySpec.uniform(env.n_states, env.n_actions, "sa", 0.01, 0.01)
    q_star = r2_optimal_q(env, spec)
    cfg = LearningConfig(max_steps=2_000_000, seed=0, exploring_starts=True,
                         log_every=100_000)
    q, _ = q_learning(env, cfg, R2(spec))
    err = float(np.max(np.abs(q - q_star)))
    timing = LearningConfig(max_steps=20_000, seed=0, log_every=1000)
    _, rec_r2 = q_learning(env, timing, R2(spec))
    _, rec_rob = q_learning(env, timing, Robust(spec, Iterative()))
    ratio = rec_rob.median_update_ns / rec_r2.median_update_ns
    ok = err <= 0.05 and ratio >= 10
    return ok, f"|q - q*|={err:.4f} (2e6 steps, seed 0); robust/r2 update time={ratio:.0f}x"


def fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def check_regularizer_duality():
    rng = np.random.default_rng(5)
    d = rng.dirichlet(np.ones(4))
    kinds = (Shannon(), KL(d), Tsallis())
    gap_sup, gap_grad = 0.0, 0.0
    for _ in range(100):
        pi = rng.dirichlet(np.ones(4))
        q = rng.normal(size=4)
        for kind in kinds:
            gap_sup = max(gap_sup, abs(support_entropy_set(kind, pi) - reg_value(kind, pi)))
            num = fd(lambda x: conjugate_value(kind, x), q)
            gap_grad = max(gap_grad, float(np.max(np.abs(conjugate_gradient(kind, q) - num))))
    ok = gap_sup <= 1e-12 and gap_grad <= 1e-5
    return ok, f"support gap={gap_sup:.1e} gradient gap={gap_grad:.1e}"


def check_policy_gradient():
    rng = np.random.default_rng(3)
    worst_rel, worst_drop = 0.0, 0.0
    for _ in range(10):
        mdp = random_mdp(rng, 3, 3)
        spec = UncertaintySpec("s", rng.uniform(0, 0.5, 3), np.zeros(3))
        theta = rng.normal(size=(3, 3))
        g = reward_robust_policy_gradient(mdp, spec, theta).gradient
        num = fd(lambda t: reward_robust_objective(mdp, spec, t), theta)
        worst_rel = max(worst_rel, float(np.linalg.norm(g - num) / np.linalg.norm(num)))
        _, objs = reward_robust_ascent(mdp, spec, theta, n_steps=200)
        worst_drop = max(worst_drop, float(-np.min(np.diff(objs))))
    ok = worst_rel <= 1e-4 and worst_drop <= 1e-12
    return ok, f"max relative error={worst_rel:.1e} largest ascent drop={max(worst_drop, 0):.1e}"


def brute_force_projection(y):
    import itertools
    best, best_d = None, np.inf
    for k in range(1, y.size + 1):
        for supp in itertools.combinations(range(y.size), k):
            idx = list(supp)
            x = np.zeros_like(y)
            x[idx] = y[idx] - (y[idx].sum() - 1.0) / k
            if np.all(x >= 0) and np.sum((x - y) ** 2) < best_d:
                best, best_d = x, np.sum((x - y) ** 2)
    return best


def check_simplex_projection():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        y = rng.normal(size=int(rng.integers(1, 5))) * rng.choice([0.1, 1, 10])
        worst = max(worst, float(np.max(np.abs(simplex_projection(y)
                                                - brute_force_projection(y)))))
    example = np.array_equal(simplex_projection([0.5, 0.5, 1.5]), [0, 0, 1])
    return worst <= 1e-10 and example, f"max error={worst:.1e} example_exact={example}"


def check_robust_eval():
    cfg = ex.ExperimentConfig(env="mars_rover", alpha_r=0.01, alpha_p=0.01,
                              seeds=list(range(10)), variants=["q-vanilla", "q-r2"],
                              eval_episodes=1000, max_steps=200_000)
    rows, _ = ex.cmd_robust_eval(cfg, [0.0, 0.2, 0.4, 0.6, 0.8])
    mean = {(r["variant"], r["epsilon"]): r["mean_return"] for r in rows}
    ok, parts = True, []
    for eps in (0.6, 0.8):
        van, r2 = mean["q-vanilla", eps], mean["q-r2", eps]
        ok &= r2 >= van
        parts.append(f"eps={eps}: r2={r2:.4f} vanilla={van:.4f}")
    return ok, "; ".join(parts)


def check_norm_estimator():
    rng = np.random.default_rng(9)
    env = make_env("mars_rover")
    q = r2_optimal_q(env, UncertaintySpec.uniform(env.n_states, env.n_actions, "sa",
                                                  0.01, 0.01))
    # uniformly exploring transitions cover every non-terminal state
    buf = ReplayBuffer(10_000)
    live = np.flatnonzero(~env.terminal_mask)
    for _ in range(10_000):
        s, a = int(rng.choice(live)), int(rng.integers(4))
        out = env.step(s, a, rng)
        buf.push(s, a, out.reward, out.next_state, out.done)
    exact = exact_v_norm(q)
    est = NormEstimator(0.1)
    for _ in range(500):
        est = batch_norm_update(est, buf, q, 128, rng)
    rel = abs(est.estimate - exact) / exact
    var = {}
    for beta in (0.01, 0.5):
        est, trail = NormEstimator(beta), []
        for i in range(3000):
            est = batch_norm_update(est, buf, q, 128, rng)
            if i >= 1000:
                trail.append(est.estimate)
        var[beta] = float(np.var(trail))
    ok = rel <= 0.05 and var[0.01] <= var[0.5]
    return ok, (f"relative error after 500 updates={rel:.4f}; "
                f"var(beta=0.01)={var[0.01]:.1e} var(beta=0.5)={var[0.5]:.1e}")


CHECKS = [
    (1, "r2 and robust policy evaluation agree on the maze", check_equivalence),
    (2, "planning cost ordering", check_planning_speed),
    (3, "radius sweeps", check_radius_sweeps),
    (4, "contraction, monotonicity and shift bound", check_operator_properties),
    (5, "optimal value dominates random policies", check_optimal_dominates),
    (6, "robust q-function identity", check_q_identity),
    (7, "r2 q-learning convergence and update cost", check_q_learning),
    (8, "regularizer duality", check_regularizer_duality),
    (9, "reward-robust policy gradient", check_policy_gradient),
    (10, "simplex projection", check_simplex_projection),
    (11, "robustness under increased slip", check_robust_eval),
    (12, "batch value-norm estimator", check_norm_estimator),
]


def run_check(num, title, fn):
    ok, detail = fn()
    line = f"{'PASS' if ok else 'FAIL'} [{num:2d}] {title}: {detail}"
    return ok, line


@pytest.mark.parametrize("num,title,fn", CHECKS, ids=[f"{n:02d}" for n, _, _ in CHECKS])
def test_acceptance(num, title, fn, capsys):
    ok, line = run_check(num, title, fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [run_check(*c) for c in CHECKS]
    for _, line in results:
        print(line)
    print(f"{sum(ok for ok, _ in results)}/{len(results)} passed")
