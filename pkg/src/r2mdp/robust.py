"""Robust Bellman operators over norm-ball uncertainty sets.

The uncertainty set is ``(P0 + P) x (r0 + R)`` where ``P`` and ``R`` are
origin-centred norm balls, rectangular either per state (``"s"``) or per
state-action pair (``"sa"``). Perturbed kernels are not projected back onto
the simplex.

Two inner solvers are available: :class:`ClosedForm` evaluates the worst
case through dual norms, and :class:`Iterative` minimises the linear inner
objective with projected gradient descent, one ball at a time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, DomainError, SolverError, UnsupportedError
from .mdp import (MAX_ITER, TabularMdp, bellman_eval_apply, check_policy, check_value,
                  deterministic_policy, fixed_point, mpi_loop, q_from_v)
from .regularizers import (L2, NormSpec, as_norm, norm_eval, norm_regularized_argmax,
                           simplex_projection)

S_RECT, SA_RECT = "s", "sa"


@dataclass(frozen=True, eq=False)
class UncertaintySpec:
    """Ball radii and norms of a rectangular uncertainty set.

    ``reward_radius`` and ``transition_radius`` have shape ``(S,)`` for
    s-rectangular sets and ``(S, A)`` for (s,a)-rectangular ones.
    """

    rectangularity: str
    reward_radius: np.ndarray
    transition_radius: np.ndarray
    reward_norm: NormSpec = L2
    transition_norm: NormSpec = L2

    def __post_init__(self):
        rect = {"s": S_RECT, "srect": S_RECT, "sa": SA_RECT, "sarect": SA_RECT}.get(
            str(self.rectangularity).lower())
        if rect is None:
            raise DomainError(f"unknown rectangularity {self.rectangularity!r}")
        ar = np.array(self.reward_radius, dtype=float)
        ap = np.array(self.transition_radius, dtype=float)
        if ar.shape != ap.shape:
            raise DimensionError("reward and transition radii must share a shape")
        if ar.ndim != (1 if rect == S_RECT else 2):
            raise DimensionError(f"{rect}-rectangular radii have the wrong rank")
        if np.any(ar < 0) or np.any(ap < 0) or not (np.all(np.isfinite(ar))
                                                    and np.all(np.isfinite(ap))):
            raise DomainError("radii must be finite and non-negative")
        ar.setflags(write=False)
        ap.setflags(write=False)
        object.__setattr__(self, "rectangularity", rect)
        object.__setattr__(self, "reward_radius", ar)
        object.__setattr__(self, "transition_radius", ap)
        object.__setattr__(self, "reward_norm", as_norm(self.reward_norm))
        object.__setattr__(self, "transition_norm", as_norm(self.transition_norm))

    @classmethod
    def uniform(cls, n_states: int, n_actions: int, rectangularity: str = SA_RECT,
                alpha_r: float = 0.0, alpha_p: float = 0.0, reward_norm=L2,
                transition_norm=L2) -> "UncertaintySpec":
        shape = (n_states,) if rectangularity in ("s", "srect") else (n_states, n_actions)
        return cls(rectangularity, np.full(shape, float(alpha_r)),
                   np.full(shape, float(alpha_p)), reward_norm, transition_norm)

    @property
    def is_sa(self) -> bool:
        return self.rectangularity == SA_RECT

    def check(self, mdp: TabularMdp) -> "UncertaintySpec":
        want = (mdp.n_states,) if not self.is_sa else (mdp.n_states, mdp.n_actions)
        if self.reward_radius.shape != want:
            raise DimensionError(f"radii must have shape {want}, "
                                 f"got {self.reward_radius.shape}")
        return self

    def sa_radii(self):
        """Radii broadcast to ``(S, A)`` (s-rectangular radii are repeated)."""
        if self.is_sa:
            return self.reward_radius, self.transition_radius
        return self.reward_radius[:, None], self.transition_radius[:, None]


@dataclass(frozen=True)
class ClosedForm:
    """Worst case through dual-norm support functions."""


@dataclass(frozen=True)
class Iterative:
    """Projected gradient descent over each ball.

    ``step`` is the step length as a fraction of the ball radius.
    """

    step: float = 0.1
    tol: float = 1e-8
    max_iter: int = 100_000

    def __post_init__(self):
        if not (self.step > 0 and self.tol > 0 and self.max_iter > 0):
            raise DomainError("Iterative solver needs step, tol, max_iter > 0")


# ---------------------------------------------------------------------------
# inner minimisation


def _ball_min(y, radius, norm: NormSpec, solver: Iterative) -> float:
    """``min <x, y>`` over the ``norm`` ball, by projected descent."""
    y = np.ascontiguousarray(y, dtype=float).ravel()
    val, _, n_iter, ok = kernels.ball_min_pgd(y, float(radius), kernels.norm_code(norm.p),
                                              solver.step, solver.tol, solver.max_iter)
    if not ok:
        raise SolverError(f"inner descent stopped after {n_iter} steps", best_value=val)
    return val


def _penalty_closed(mdp, spec, pi, v):
    """``sigma_R(-pi_s) + sigma_P(-gamma v . pi_s)`` per state."""
    gamma = mdp.discount
    r_dual, p_dual = spec.reward_norm.dual, spec.transition_norm.dual
    if spec.is_sa:
        # each (s,a) ball is scored against pi(a) * 1 and pi(a) * gamma * v
        v_norm = norm_eval(v, p_dual)
        return np.sum(pi * (spec.reward_radius + gamma * spec.transition_radius * v_norm),
                      axis=1)
    out = np.empty(mdp.n_states)
    for s in range(mdp.n_states):
        out[s] = (spec.reward_radius[s] * norm_eval(pi[s], r_dual)
                  + spec.transition_radius[s] * norm_eval(gamma * np.outer(v, pi[s]), p_dual))
    return out


def _penalty_iterative(mdp, spec, pi, v, solver):
    gamma = mdp.discount
    out = np.zeros(mdp.n_states)
    for s in range(mdp.n_states):
        if spec.is_sa:
            for a in range(mdp.n_actions):
                if pi[s, a] == 0.0:
                    continue
                out[s] -= _ball_min([pi[s, a]], spec.reward_radius[s, a],
                                    spec.reward_norm, solver)
                out[s] -= _ball_min(gamma * pi[s, a] * v, spec.transition_radius[s, a],
                                    spec.transition_norm, solver)
        else:
            out[s] -= _ball_min(pi[s], spec.reward_radius[s], spec.reward_norm, solver)
            out[s] -= _ball_min(gamma * np.outer(v, pi[s]), spec.transition_radius[s],
                                spec.transition_norm, solver)
    return out


def robust_penalty(mdp, spec, policy, v, solver=ClosedForm()) -> np.ndarray:
    """Per-state gap between the nominal and the worst-case evaluation."""
    spec.check(mdp)
    pi = check_policy(mdp, policy)
    v = check_value(mdp, v)
    if isinstance(solver, ClosedForm):
        return _penalty_closed(mdp, spec, pi, v)
    if isinstance(solver, Iterative):
        return _penalty_iterative(mdp, spec, pi, v, solver)
    raise DomainError(f"unknown solver {solver!r}")


def robust_bellman_eval_apply(mdp, spec, policy, v, solver=ClosedForm()) -> np.ndarray:
    """Worst-case evaluation step ``min_{(P,r) in U} T^pi_{(P,r)} v``."""
    return bellman_eval_apply(mdp, policy, v) - robust_penalty(mdp, spec, policy, v, solver)


def robust_q_values(mdp, spec, v, solver=ClosedForm()) -> np.ndarray:
    """(s,a)-rectangular worst-case action values."""
    if not spec.check(mdp).is_sa:
        raise UnsupportedError("robust action values need an (s,a)-rectangular set")
    q = q_from_v(mdp, v)
    gamma = mdp.discount
    if isinstance(solver, ClosedForm):
        v_norm = norm_eval(v, spec.transition_norm.dual)
        return q - spec.reward_radius - gamma * spec.transition_radius * v_norm
    if not isinstance(solver, Iterative):
        raise DomainError(f"unknown solver {solver!r}")
    out = q.copy()
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            out[s, a] += _ball_min([1.0], spec.reward_radius[s, a], spec.reward_norm, solver)
            out[s, a] += gamma * _ball_min(v, spec.transition_radius[s, a],
                                           spec.transition_norm, solver)
    return out


def _srect_ascent(q_s, objective, gradient, solver: Iterative):
    """Projected gradient ascent of a concave per-state objective."""
    n = q_s.size
    pi = np.full(n, 1.0 / n)
    f = objective(pi)
    step = 1.0 / (1.0 + np.abs(q_s).max() + math.sqrt(n))
    for _ in range(solver.max_iter):
        cand = simplex_projection(pi + step * gradient(pi))
        f_new = objective(cand)
        if f_new < f:
            step *= 0.5
            if step < 1e-14:
                return pi
            continue
        pi, gain, f = cand, f_new - f, f_new
        if gain < solver.tol:
            return pi
    raise SolverError("outer ascent did not converge", best_value=f)


def _srect_greedy(mdp, spec, v, solver):
    q = q_from_v(mdp, v)
    gamma = mdp.discount
    pi = np.empty_like(q)
    if isinstance(solver, ClosedForm):
        # ||v (x) pi||_* factors as ||v||_* ||pi||_* for l_p norms
        v_norm = norm_eval(v, spec.transition_norm.dual)
        for s in range(mdp.n_states):
            terms = [(spec.reward_radius[s], spec.reward_norm.dual.p),
                     (gamma * spec.transition_radius[s] * v_norm, spec.transition_norm.dual.p)]
            pi[s] = norm_regularized_argmax(q[s], terms)
        return pi
    code_r = kernels.norm_code(spec.reward_norm.p)
    code_p = kernels.norm_code(spec.transition_norm.p)

    for s in range(mdp.n_states):
        ar, ap = spec.reward_radius[s], spec.transition_radius[s]

        def inner(p):
            y_p = gamma * np.outer(v, p)
            fr, xr, _, ok_r = kernels.ball_min_pgd(p, ar, code_r, solver.step, solver.tol,
                                                   solver.max_iter)
            fp, xp, _, ok_p = kernels.ball_min_pgd(y_p.ravel(), ap, code_p, solver.step,
                                                   solver.tol, solver.max_iter)
            if not (ok_r and ok_p):
                raise SolverError("inner descent did not converge")
            return fr + fp, xr, xp.reshape(y_p.shape)

        def objective(p, q_s=q[s]):
            return float(p @ q_s) + inner(p)[0]

        def gradient(p, q_s=q[s]):
            _, xr, xp = inner(p)
            return q_s + xr + gamma * (v @ xp)

        pi[s] = _srect_ascent(q[s], objective, gradient, solver)
    return pi


def robust_greedy(mdp, spec, v, solver=ClosedForm()) -> np.ndarray:
    """Policy attaining the robust optimality step at ``v``."""
    spec.check(mdp)
    v = check_value(mdp, v)
    if spec.is_sa:
        return deterministic_policy(robust_q_values(mdp, spec, v, solver).argmax(axis=1),
                                    mdp.n_actions)
    return _srect_greedy(mdp, spec, v, solver)


def robust_bellman_opt_apply(mdp, spec, v, solver=ClosedForm()) -> np.ndarray:
    if spec.check(mdp).is_sa:
        return robust_q_values(mdp, spec, v, solver).max(axis=1)
    pi = _srect_greedy(mdp, spec, check_value(mdp, v), solver)
    return robust_bellman_eval_apply(mdp, spec, pi, v, solver)


def worst_case_model(mdp, spec, policy, v):
    """Perturbed ``(P, r)`` attaining the ClosedForm worst case (l2 balls only).

    Zero-norm directions leave the nominal block unchanged.
    """
    spec.check(mdp)
    if spec.reward_norm.p != 2.0 or spec.transition_norm.p != 2.0:
        raise UnsupportedError("worst_case_model supports l2 balls only")
    pi = check_policy(mdp, policy)
    v = check_value(mdp, v)
    P = np.array(mdp.transition)
    r = np.array(mdp.reward)
    nv = np.linalg.norm(v)
    for s in range(mdp.n_states):
        if spec.is_sa:
            r[s] -= spec.reward_radius[s]
            if nv > 0:
                P[s] -= spec.transition_radius[s][:, None] * (v / nv)[None, :]
            continue
        n_pi = np.linalg.norm(pi[s])
        if n_pi > 0:
            r[s] -= spec.reward_radius[s] * pi[s] / n_pi
        direction = np.outer(pi[s], v)  # indexed [a, s'] like P[s]
        nd = np.linalg.norm(direction)
        if nd > 0:
            P[s] -= spec.transition_radius[s] * direction / nd
    return P, r


def robust_policy_evaluation(mdp, spec, policy, tol: float = 1e-10,
                             solver=ClosedForm(), v0=None, max_iter: int = MAX_ITER,
                             trace=None) -> np.ndarray:
    pi = check_policy(mdp, policy)
    v0 = np.zeros(mdp.n_states) if v0 is None else v0
    v, _ = fixed_point(lambda v: robust_bellman_eval_apply(mdp, spec, pi, v, solver),
                       v0, tol, max_iter, trace)
    return v


def robust_mpi(mdp, spec, m: int = 1, tol: float = 1e-10, solver=ClosedForm(),
               v0=None, max_iter: int = MAX_ITER, trace=None):
    """Robust modified policy iteration. Returns ``(policy, v, n_outer)``."""
    spec.check(mdp)
    v0 = np.zeros(mdp.n_states) if v0 is None else v0
    return mpi_loop(lambda v: robust_greedy(mdp, spec, v, solver),
                    lambda pi, v: robust_bellman_eval_apply(mdp, spec, pi, v, solver),
                    v0, m, tol, max_iter, trace)
