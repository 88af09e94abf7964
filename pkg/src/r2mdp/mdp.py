"""Finite MDP model and the standard Bellman machinery.

Arrays follow one layout everywhere:

* transition ``P[s, a, s']``
* reward ``r[s, a]``
* policy ``pi[s, a]`` (row-stochastic)
* value ``v[s]`` and action value ``q[s, a]``
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, DivergenceError, DomainError

MAX_ITER = 10**6
ROW_TOL = 1e-12
LOAD_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class TabularMdp:
    """Nominal model ``(P0, r0, gamma, mu0)`` over ``S x A``.

    ``terminal`` optionally flags absorbing episode-ending states of a
    simulator export. Planning operators ignore it; the learning module uses
    it to pin terminal values at zero.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    initial_dist: np.ndarray
    terminal: np.ndarray = field(default=None)

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        mu0 = np.array(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise DimensionError(f"transition must be (S, A, S), got {P.shape}")
        n_s, n_a = P.shape[:2]
        if n_s < 1 or n_a < 1:
            raise DimensionError("need at least one state and one action")
        if r.shape != (n_s, n_a):
            raise DimensionError(f"reward must be {(n_s, n_a)}, got {r.shape}")
        if mu0.shape != (n_s,):
            raise DimensionError(f"initial_dist must be ({n_s},), got {mu0.shape}")
        _check_stochastic(P, ROW_TOL, "transition rows")
        _check_stochastic(mu0, ROW_TOL, "initial_dist")
        if not np.all(np.isfinite(r)):
            raise DomainError("reward has non-finite entries")
        gamma = float(self.discount)
        if not 0.0 < gamma < 1.0:
            raise DomainError(f"discount must lie in (0, 1), got {gamma}")
        term = (np.zeros(n_s, dtype=bool) if self.terminal is None
                else np.array(self.terminal, dtype=bool))
        if term.shape != (n_s,):
            raise DimensionError(f"terminal mask must be ({n_s},)")
        for name, arr in (("transition", P), ("reward", r), ("initial_dist", mu0),
                          ("terminal", term)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "discount", gamma)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        d = {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.discount,
            "mu0": self.initial_dist.tolist(),
            "reward": self.reward.tolist(),
            "transition": self.transition.tolist(),
        }
        if self.terminal.any():
            d["terminal"] = np.flatnonzero(self.terminal).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict, tol: float = LOAD_TOL) -> "TabularMdp":
        try:
            P = np.asarray(d["transition"], dtype=float)
            r = np.asarray(d["reward"], dtype=float)
            mu0 = np.asarray(d["mu0"], dtype=float)
            gamma = d["gamma"]
            n_s, n_a = int(d["n_states"]), int(d["n_actions"])
        except KeyError as exc:
            raise DomainError(f"MDP document is missing field {exc}") from None
        if P.shape != (n_s, n_a, n_s):
            raise DimensionError(f"transition shape {P.shape} != {(n_s, n_a, n_s)}")
        _check_stochastic(P, tol, "transition rows")
        _check_stochastic(mu0, tol, "mu0")
        # loaded rows are only validated to `tol`; renormalise so the model is exact
        P = P / P.sum(axis=-1, keepdims=True)
        mu0 = mu0 / mu0.sum()
        term = None
        if "terminal" in d:
            term = np.zeros(n_s, dtype=bool)
            term[np.asarray(d["terminal"], dtype=int)] = True
        return cls(P, r, gamma, mu0, term)


def _check_stochastic(x, tol, what):
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{what} contain non-finite entries")
    if np.any(x < -tol):
        raise DomainError(f"{what} have negative entries")
    err = np.max(np.abs(x.sum(axis=-1) - 1.0))
    if err > tol:
        raise DomainError(f"{what} do not sum to 1 (max error {err:.3g})")


def load_mdp(path) -> TabularMdp:
    with open(path) as fh:
        return TabularMdp.from_dict(json.load(fh))


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp.to_dict()))


# ---------------------------------------------------------------------------
# policies and shape checks


def check_policy(mdp: TabularMdp, policy, tol: float = ROW_TOL) -> np.ndarray:
    pi = np.asarray(policy, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(
            f"policy must be {(mdp.n_states, mdp.n_actions)}, got {pi.shape}")
    _check_stochastic(pi, tol, "policy rows")
    return pi


def check_value(mdp: TabularMdp, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise DimensionError(f"value must be ({mdp.n_states},), got {v.shape}")
    return v


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros((actions.size, n_actions))
    pi[np.arange(actions.size), actions] = 1.0
    return pi


def uniform_policy(mdp: TabularMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def policy_reward(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """``r^pi(s) = <pi_s, r(s, .)>``."""
    return np.einsum("sa,sa->s", pi, mdp.reward)


def policy_transition(mdp: TabularMdp, pi: np.ndarray) -> np.ndarray:
    """``P^pi[s, s'] = <pi_s, P(s'|s, .)>``."""
    return np.einsum("sa,sat->st", pi, mdp.transition)


# ---------------------------------------------------------------------------
# operators


def bellman_eval_apply(mdp: TabularMdp, policy, v) -> np.ndarray:
    pi = check_policy(mdp, policy)
    v = check_value(mdp, v)
    return policy_reward(mdp, pi) + mdp.discount * policy_transition(mdp, pi) @ v


def q_from_v(mdp: TabularMdp, v) -> np.ndarray:
    v = check_value(mdp, v)
    return mdp.reward + mdp.discount * (mdp.transition @ v)


def bellman_opt_apply(mdp: TabularMdp, v) -> np.ndarray:
    return q_from_v(mdp, v).max(axis=1)


def greedy_policy(mdp: TabularMdp, v) -> np.ndarray:
    # np.argmax returns the first maximiser: lowest-index tie break
    return deterministic_policy(q_from_v(mdp, v).argmax(axis=1), mdp.n_actions)


def fixed_point(op, v0, tol: float, max_iter: int = MAX_ITER, trace=None):
    """Iterate ``v <- op(v)`` until ``||v_next - v||_inf <= tol``.

    Returns ``(v_next, n_applications)``. When ``trace`` is a list, a
    ``(residual, perf_counter_ns)`` pair is appended after every application.
    """
    if not tol > 0:
        raise DomainError("tol must be positive")
    v = np.asarray(v0, dtype=float)
    for k in range(1, max_iter + 1):
        v_next = op(v)
        res = float(np.max(np.abs(v_next - v)))
        if trace is not None:
            trace.append((res, time.perf_counter_ns()))
        if not np.isfinite(res):
            raise DivergenceError(f"non-finite iterate after {k} applications",
                                  last_value=v, residual=res)
        if res <= tol:
            return v_next, k
        v = v_next
    raise DivergenceError(f"no convergence within {max_iter} applications",
                          last_value=v, residual=res)


def policy_evaluation(mdp: TabularMdp, policy, tol: float = 1e-10,
                      method: str = "iterate", max_iter: int = MAX_ITER,
                      trace=None) -> np.ndarray:
    """Value of ``policy`` on the nominal model.

    ``method="iterate"`` runs the fixed-point iteration to sup-norm step
    ``tol``; ``method="linear"`` solves ``(I - gamma P^pi) v = r^pi`` directly
    and is meant as a cross-check.
    """
    pi = check_policy(mdp, policy)
    r_pi = policy_reward(mdp, pi)
    P_pi = policy_transition(mdp, pi)
    if method == "linear":
        return np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P_pi, r_pi)
    if method != "iterate":
        raise DomainError(f"unknown evaluation method {method!r}")
    gamma = mdp.discount
    v, _ = fixed_point(lambda v: r_pi + gamma * (P_pi @ v),
                       np.zeros(mdp.n_states), tol, max_iter, trace)
    return v


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, v0=None,
                    max_iter: int = MAX_ITER):
    """Optimal value by iterating the optimality operator; returns (policy, v)."""
    v0 = np.zeros(mdp.n_states) if v0 is None else v0
    v, _ = fixed_point(lambda v: bellman_opt_apply(mdp, v), v0, tol, max_iter)
    return greedy_policy(mdp, v), v


def occupancy_measure(mdp: TabularMdp, policy) -> np.ndarray:
    """Discounted state-action visitation ``mu_pi[s, a]``.

    Solves the flow equation ``(I - gamma P^pi_*) d = mu0`` for the state
    marginal, then spreads it over actions with ``pi``.
    """
    pi = check_policy(mdp, policy)
    P_pi = policy_transition(mdp, pi)
    d = np.linalg.solve(np.eye(mdp.n_states) - mdp.discount * P_pi.T, mdp.initial_dist)
    return d[:, None] * pi


def policy_return(mdp: TabularMdp, policy, tol: float = 1e-12) -> float:
    """``<v^pi, mu0>``."""
    return float(policy_evaluation(mdp, policy, tol) @ mdp.initial_dist)


def random_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
               gamma: float = 0.9, dense: bool = True, reward_scale: float = 1.0
               ) -> TabularMdp:
    """Random model used by property tests and sweeps.

    ``dense=True`` draws every transition row from a flat Dirichlet so all
    entries are strictly positive.
    """
    if dense:
        P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    else:
        P = np.zeros((n_states, n_actions, n_states))
        idx = rng.integers(n_states, size=(n_states, n_actions))
        P[np.arange(n_states)[:, None], np.arange(n_actions), idx] = 1.0
    r = reward_scale * rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    mu0 = rng.dirichlet(np.ones(n_states))
    return TabularMdp(P, r, gamma, mu0)


def mpi_loop(greedy, eval_apply, v0, m: int, tol: float, max_iter: int = MAX_ITER,
             trace=None):
    """Generic modified policy iteration.

    Repeats ``pi <- greedy(v)`` followed by ``m`` applications of
    ``eval_apply(pi, .)`` until one outer step moves ``v`` by at most ``tol``
    in sup-norm. Returns ``(greedy(v), v, n_outer)``.
    """
    if m < 1:
        raise DomainError(f"m must be >= 1, got {m}")
    if not tol > 0:
        raise DomainError("tol must be positive")
    v = np.asarray(v0, dtype=float)
    for k in range(1, max_iter + 1):
        pi = greedy(v)
        w = v
        for _ in range(m):
            w = eval_apply(pi, w)
        res = float(np.max(np.abs(w - v)))
        if trace is not None:
            trace.append((res, time.perf_counter_ns()))
        if not np.isfinite(res):
            raise DivergenceError(f"non-finite iterate after {k} outer steps",
                                  last_value=v, residual=res)
        v = w
        if res <= tol:
            return greedy(v), v, k
    raise DivergenceError(f"no convergence within {max_iter} outer steps",
                          last_value=v, residual=res)


def modified_policy_iteration(mdp: TabularMdp, m: int = 1, tol: float = 1e-10,
                              v0=None, max_iter: int = MAX_ITER, trace=None):
    """Standard MPI; ``m=1`` is value iteration. Returns (policy, v, n_outer)."""
    v0 = np.zeros(mdp.n_states) if v0 is None else v0
    return mpi_loop(lambda v: greedy_policy(mdp, v),
                    lambda pi, v: bellman_eval_apply(mdp, pi, v),
                    v0, m, tol, max_iter, trace)
