"""Twice-regularized (R2) Bellman operators and planners.

The R2 operators replace the inner worst case of the robust operators with a
policy-and-value regularizer::

    s-rect:  T^pi v(s) - a^r_s ||pi_s||_r* - gamma a^P_s ||v||_P* ||pi_s||_P*
    sa-rect: T^pi v(s) - sum_a pi_s(a) (a^r_sa + gamma a^P_sa ||v||_P*)

where ``||.||_r*`` and ``||.||_P*`` are the duals of the reward and
transition ball norms.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, UnsupportedError
from .mdp import (MAX_ITER, TabularMdp, bellman_eval_apply, check_policy, check_value,
                  deterministic_policy, fixed_point, mpi_loop, occupancy_measure,
                  policy_reward, policy_transition, q_from_v)
from .regularizers import norm_eval, norm_regularized_argmax, pga_argmax, reg_value
from .robust import UncertaintySpec, robust_policy_evaluation


class AssumptionWarning(UserWarning):
    """The radius bound that guarantees contraction does not hold."""


@dataclass(frozen=True, eq=False)
class R2Config:
    """Uncertainty spec plus the slack ``epsilon_s`` of the radius bound.

    ``greedy_method`` selects how s-rectangular greedy rows are computed:
    ``"exact"`` (sort and threshold) or ``"pga"`` (projected-gradient ascent).
    """

    spec: UncertaintySpec
    epsilon: np.ndarray | float = 1e-3
    greedy_tol: float = 1e-10
    greedy_method: str = "exact"

    def __post_init__(self):
        eps = np.atleast_1d(np.asarray(self.epsilon, dtype=float))
        n_s = self.spec.reward_radius.shape[0]
        if eps.size == 1:
            eps = np.full(n_s, eps[0])
        if eps.shape != (n_s,) or np.any(eps <= 0):
            raise DomainError("epsilon must be positive, one entry per state")
        if not self.greedy_tol > 0:
            raise DomainError("greedy_tol must be positive")
        if self.greedy_method not in ("exact", "pga"):
            raise DomainError(f"unknown greedy method {self.greedy_method!r}")
        eps.setflags(write=False)
        object.__setattr__(self, "epsilon", eps)


def _v_norm(cfg: R2Config, v) -> float:
    return norm_eval(v, cfg.spec.transition_norm.dual)


def r2_penalty(mdp: TabularMdp, cfg: R2Config, policy, v) -> np.ndarray:
    """Per-state R2 regularizer ``Omega_{v,R2}(pi_s)``."""
    spec = cfg.spec.check(mdp)
    pi = check_policy(mdp, policy)
    v_norm = _v_norm(cfg, check_value(mdp, v))
    gamma = mdp.discount
    if spec.is_sa:
        return np.sum(pi * (spec.reward_radius + gamma * spec.transition_radius * v_norm),
                      axis=1)
    r_dual, p_dual = spec.reward_norm.dual, spec.transition_norm.dual
    return np.array([spec.reward_radius[s] * norm_eval(pi[s], r_dual)
                     + gamma * spec.transition_radius[s] * v_norm * norm_eval(pi[s], p_dual)
                     for s in range(mdp.n_states)])


def r2_bellman_eval_apply(mdp, cfg, policy, v) -> np.ndarray:
    return bellman_eval_apply(mdp, policy, v) - r2_penalty(mdp, cfg, policy, v)


def r2_q_values(mdp, cfg, v) -> np.ndarray:
    """(s,a)-rectangular regularized action values."""
    spec = cfg.spec.check(mdp)
    if not spec.is_sa:
        raise UnsupportedError("regularized action values need an (s,a)-rectangular set")
    return (q_from_v(mdp, v) - spec.reward_radius
            - mdp.discount * spec.transition_radius * _v_norm(cfg, v))


def r2_greedy(mdp, cfg, v) -> np.ndarray:
    spec = cfg.spec.check(mdp)
    v = check_value(mdp, v)
    if spec.is_sa:
        return deterministic_policy(r2_q_values(mdp, cfg, v).argmax(axis=1), mdp.n_actions)
    q = q_from_v(mdp, v)
    v_norm = _v_norm(cfg, v)
    pi = np.empty_like(q)
    for s in range(mdp.n_states):
        terms = [(spec.reward_radius[s], spec.reward_norm.dual.p),
                 (mdp.discount * spec.transition_radius[s] * v_norm,
                  spec.transition_norm.dual.p)]
        if cfg.greedy_method == "exact":
            pi[s] = norm_regularized_argmax(q[s], terms)
        else:
            pi[s] = pga_argmax(q[s], terms, tol=cfg.greedy_tol)
    return pi


def r2_bellman_opt_apply(mdp, cfg, v) -> np.ndarray:
    if cfg.spec.check(mdp).is_sa:
        return r2_q_values(mdp, cfg, v).max(axis=1)
    return r2_bellman_eval_apply(mdp, cfg, r2_greedy(mdp, cfg, v), v)


# ---------------------------------------------------------------------------
# radius bound


@dataclass(frozen=True, eq=False)
class AssumptionReport:
    bound: np.ndarray
    radius: np.ndarray
    holds: np.ndarray
    contraction: float = field(default=math.nan)

    @property
    def all_hold(self) -> bool:
        return bool(np.all(self.holds))


def dual_index(norm) -> float:
    """Hoelder conjugate ``q`` of the transition-ball norm index."""
    return {1.0: math.inf, 2.0: 2.0, math.inf: 1.0}[norm.p]


def check_assumption_1(mdp: TabularMdp, cfg: R2Config) -> AssumptionReport:
    """Per-state radius bound guaranteeing monotone, contracting operators.

    ``bound_s = min((1 - gamma - eps_s) / (gamma |S|^(1/q)), min P0(.|s,.))``
    where ``q`` is the dual index of the transition norm. For (s,a)-rectangular
    sets the largest radius of each state is compared to its bound.
    """
    spec = cfg.spec.check(mdp)
    gamma = mdp.discount
    q = dual_index(spec.transition_norm)
    scale = 1.0 if math.isinf(q) else mdp.n_states ** (1.0 / q)
    slack = 1.0 - gamma - cfg.epsilon
    first = np.where(slack > 0, slack / (gamma * scale), 0.0)
    # min of u^T B w over nonnegative unit u, w is the smallest entry of B
    second = mdp.transition.min(axis=(1, 2))
    bound = np.minimum(first, second)
    radius = spec.transition_radius.max(axis=1) if spec.is_sa else spec.transition_radius
    holds = np.where(slack > 0, radius <= bound, radius == 0)
    return AssumptionReport(bound, radius, holds, 1.0 - float(cfg.epsilon.min()))


def sampled_bilinear_min(block, n_samples: int, rng) -> float:
    """Sampled minimum of ``u^T block w`` over nonnegative unit vectors.

    Supports are drawn at random so sparse directions, including coordinate
    vectors, are hit often. The result upper-bounds the true minimum.
    """
    n_a, n_s = block.shape

    def draw(n):
        x = np.abs(rng.normal(size=(n_samples, n)))
        mask = rng.random((n_samples, n)) < rng.random((n_samples, 1))
        mask[np.arange(n_samples), rng.integers(n, size=n_samples)] = True
        x = x * mask
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    u, w = draw(n_a), draw(n_s)
    return float(np.einsum("ka,as,ks->k", u, block, w).min())


def _warn_if_violated(mdp, cfg):
    report = check_assumption_1(mdp, cfg)
    if not report.all_hold:
        warnings.warn(f"radius bound fails at {int(np.sum(~report.holds))} state(s); "
                      "contraction is not guaranteed", AssumptionWarning, stacklevel=3)


# ---------------------------------------------------------------------------
# evaluation and planning


def _penalty_coefficients(mdp, cfg, pi):
    """``(c_r, c_p)`` with ``Omega_{v,R2}(pi_s) = c_r[s] + gamma c_p[s] ||v||``."""
    spec = cfg.spec
    if spec.is_sa:
        return (np.sum(pi * spec.reward_radius, axis=1),
                np.sum(pi * spec.transition_radius, axis=1))
    r_dual, p_dual = spec.reward_norm.dual, spec.transition_norm.dual
    return (spec.reward_radius * np.array([norm_eval(row, r_dual) for row in pi]),
            spec.transition_radius * np.array([norm_eval(row, p_dual) for row in pi]))


def _eval_step(mdp, cfg, pi):
    """Evaluation operator of a fixed policy with its policy terms precomputed."""
    r_pi, P_pi = policy_reward(mdp, pi), policy_transition(mdp, pi)
    c_r, c_p = _penalty_coefficients(mdp, cfg, pi)
    base = r_pi - c_r
    gamma = mdp.discount
    dual = cfg.spec.transition_norm.dual
    return lambda v: base + gamma * (P_pi @ v - c_p * norm_eval(v, dual))


def r2_policy_evaluation(mdp, cfg, policy, tol: float = 1e-10, v0=None,
                         max_iter: int = MAX_ITER, trace=None) -> np.ndarray:
    cfg.spec.check(mdp)
    _warn_if_violated(mdp, cfg)
    pi = check_policy(mdp, policy)
    v0 = np.zeros(mdp.n_states) if v0 is None else v0
    v, _ = fixed_point(_eval_step(mdp, cfg, pi), v0, tol, max_iter, trace)
    return v


def r2_mpi(mdp, cfg, m: int = 1, tol: float = 1e-10, v0=None,
           max_iter: int = MAX_ITER, trace=None):
    """R2 modified policy iteration. Returns ``(policy, v, n_outer)``."""
    cfg.spec.check(mdp)
    _warn_if_violated(mdp, cfg)
    v0 = np.zeros(mdp.n_states) if v0 is None else v0

    def eval_apply(pi, v):
        step = _eval_step(mdp, cfg, pi)
        for _ in range(m - 1):
            v = step(v)
        return step(v)

    # the m sweeps run inside one eval call so policy terms are built once
    pol, v, k = mpi_loop(lambda v: r2_greedy(mdp, cfg, v), eval_apply, v0, 1, tol,
                         max_iter, trace)
    return pol, v, k


def regularized_policy_evaluation(mdp, policy, kinds, tol: float = 1e-10) -> np.ndarray:
    """Value of ``T^pi v - Omega_s(pi_s)``; ``kinds`` is one regularizer or one per state."""
    pi = check_policy(mdp, policy)
    if not isinstance(kinds, (list, tuple)):
        kinds = [kinds] * mdp.n_states
    omega = np.array([reg_value(k, pi[s]) for s, k in enumerate(kinds)])
    v, _ = fixed_point(lambda v: bellman_eval_apply(mdp, pi, v) - omega,
                       np.zeros(mdp.n_states), tol)
    return v


# ---------------------------------------------------------------------------
# action-value operator


def q_dot_pi(q, policy) -> np.ndarray:
    """``(q . pi)(s) = sum_a pi_s(a) q(s, a)``."""
    return np.sum(np.asarray(q) * np.asarray(policy), axis=1)


def r2_q_bellman_apply(mdp, cfg, q, policy) -> np.ndarray:
    """``T^pi q(s,a) - a^r_sa - gamma a^P_sa ||q . pi||_*`` ((s,a)-rect only)."""
    spec = cfg.spec.check(mdp)
    if not spec.is_sa:
        raise UnsupportedError("the regularized q-operator needs an (s,a)-rectangular set")
    pi = check_policy(mdp, policy)
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise DomainError("q must have shape (S, A)")
    w = q_dot_pi(q, pi)
    return (mdp.reward + mdp.discount * (mdp.transition @ w) - spec.reward_radius
            - mdp.discount * spec.transition_radius * _v_norm(cfg, w))


def r2_q_evaluation(mdp, cfg, policy, tol: float = 1e-12,
                    max_iter: int = MAX_ITER) -> np.ndarray:
    """Fixed point of :func:`r2_q_bellman_apply`."""
    shape = (mdp.n_states, mdp.n_actions)
    flat, _ = fixed_point(
        lambda x: r2_q_bellman_apply(mdp, cfg, x.reshape(shape), policy).ravel(),
        np.zeros(mdp.n_states * mdp.n_actions), tol, max_iter)
    return flat.reshape(shape)


# ---------------------------------------------------------------------------
# reward-robust policy gradient


@dataclass(frozen=True, eq=False)
class GradientReport:
    gradient: np.ndarray
    objective: float
    policy: np.ndarray


def softmax_policy(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    z = np.exp(theta - theta.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def _check_reward_only(spec: UncertaintySpec):
    if spec.is_sa or spec.reward_norm.p != 2.0:
        raise UnsupportedError("the policy gradient supports s-rectangular l2 reward balls")
    if np.any(spec.transition_radius != 0):
        raise UnsupportedError("the policy gradient under transition uncertainty is not "
                               "available")


def reward_robust_objective(mdp, spec, theta, tol: float = 1e-13) -> float:
    """``J_U = <v^{pi,U}, mu0>`` for ``pi = softmax(theta)``."""
    _check_reward_only(spec)
    v = robust_policy_evaluation(mdp, spec, softmax_policy(theta), tol)
    return float(v @ mdp.initial_dist)


def reward_robust_policy_gradient(mdp, spec, theta, tol: float = 1e-13) -> GradientReport:
    """Gradient of the worst-case return under reward-only ball uncertainty.

    With ``pi = softmax(theta)`` per state,
    ``grad[s, b] = sum_a mu(s,a) (1[a=b] - pi_s(b)) (q(s,a) - a^r_s pi_s(a)/||pi_s||)``,
    where ``q = r0 + gamma P0 v^{pi,U}`` and ``mu`` is the nominal occupancy.
    """
    _check_reward_only(spec.check(mdp))
    pi = softmax_policy(theta)
    v = robust_policy_evaluation(mdp, spec, pi, tol)
    q = q_from_v(mdp, v)
    mu = occupancy_measure(mdp, pi)
    c = q - spec.reward_radius[:, None] * pi / np.linalg.norm(pi, axis=1, keepdims=True)
    weighted = mu * c
    grad = weighted - pi * weighted.sum(axis=1, keepdims=True)
    return GradientReport(grad, float(v @ mdp.initial_dist), pi)


def reward_robust_ascent(mdp, spec, theta0, step: float = 0.5, n_steps: int = 200):
    """Plain gradient ascent on ``theta``; returns ``(theta, objectives)``."""
    theta = np.array(theta0, dtype=float)
    objectives = []
    for _ in range(n_steps):
        rep = reward_robust_policy_gradient(mdp, spec, theta)
        objectives.append(rep.objective)
        theta = theta + step * rep.gradient
    objectives.append(reward_robust_objective(mdp, spec, theta))
    return theta, objectives
