"""Policy regularizers, their convex conjugates, and support functions.

Each regularizer acts on one policy row ``pi_s`` (a point of the simplex).
``conjugate_value(kind, q)`` is ``max_pi <pi, q> - Omega(pi)`` and
``conjugate_gradient(kind, q)`` its unique maximiser.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .errors import DomainError, SolverError, UnsupportedError

SIMPLEX_TOL = 1e-9


# ---------------------------------------------------------------------------
# norms


@dataclass(frozen=True)
class NormSpec:
    """An l_p norm with ``p`` in {1, 2, inf}."""

    p: float = 2.0

    def __post_init__(self):
        p = float(self.p)
        if p not in (1.0, 2.0, math.inf):
            raise DomainError(f"only p in {{1, 2, inf}} is supported, got {self.p}")
        object.__setattr__(self, "p", p)

    @property
    def dual(self) -> "NormSpec":
        return NormSpec({1.0: math.inf, 2.0: 2.0, math.inf: 1.0}[self.p])

    def __call__(self, x) -> float:
        return norm_eval(x, self)

    def __str__(self):
        return {1.0: "l1", 2.0: "l2", math.inf: "linf"}[self.p]


L1, L2, LINF = NormSpec(1), NormSpec(2), NormSpec(math.inf)


def as_norm(x) -> NormSpec:
    """Accept a NormSpec, a number, or one of 'l1', 'l2', 'linf'."""
    if isinstance(x, NormSpec):
        return x
    if isinstance(x, str):
        key = x.lower().lstrip("l")
        if key in ("inf", "infinity"):
            return LINF
        return NormSpec(float(key))
    return NormSpec(x)


def norm_eval(x, norm: NormSpec = L2) -> float:
    x = np.ravel(np.asarray(x, dtype=float))
    if x.size == 0:
        return 0.0
    p = as_norm(norm).p
    if p == 1.0:
        return float(np.abs(x).sum())
    if p == 2.0:
        return float(np.sqrt(x @ x))
    return float(np.abs(x).max())


def support_ball(radius: float, norm: NormSpec, y) -> float:
    """Support function of the origin-centred ``norm`` ball, ``radius * ||y||_*``."""
    if radius < 0:
        raise DomainError(f"radius must be non-negative, got {radius}")
    return float(radius) * norm_eval(y, as_norm(norm).dual)


def ball_maximizer(radius: float, norm: NormSpec, y) -> np.ndarray:
    """A point of the ball attaining ``support_ball(radius, norm, y)``."""
    y = np.asarray(y, dtype=float)
    norm = as_norm(norm)
    out = np.zeros_like(y)
    if radius == 0 or not np.any(y):
        return out
    if norm.p == 2.0:
        return radius * y / np.sqrt(np.sum(y * y))
    if norm.p == math.inf:
        return radius * np.sign(y)
    # l1 ball: all mass on one coordinate of largest magnitude
    flat = np.abs(y).ravel()
    i = int(np.argmax(flat))
    out.ravel()[i] = radius * np.sign(y.ravel()[i])
    return out


def project_ball(x, radius: float, norm: NormSpec) -> np.ndarray:
    """Euclidean projection onto the origin-centred ``norm`` ball."""
    x = np.asarray(x, dtype=float)
    p = as_norm(norm).p
    if radius == 0:
        return np.zeros_like(x)
    if p == 2.0:
        n = np.sqrt(np.sum(x * x))
        return x if n <= radius else x * (radius / n)
    if p == math.inf:
        return np.clip(x, -radius, radius)
    a = np.abs(x).ravel()
    if a.sum() <= radius:
        return x
    w = simplex_projection(a / radius) * radius
    return (np.sign(x).ravel() * w).reshape(x.shape)


# ---------------------------------------------------------------------------
# simplex


def simplex_projection(x) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort and threshold)."""
    x = np.ascontiguousarray(x, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("simplex_projection expects a non-empty 1-D array")
    if not np.all(np.isfinite(x)):
        raise DomainError("simplex_projection input must be finite")
    return kernels.simplex_projection(x)


def check_simplex(row, tol: float = SIMPLEX_TOL) -> np.ndarray:
    row = np.asarray(row, dtype=float)
    if row.ndim != 1 or np.any(row < -tol) or abs(row.sum() - 1.0) > tol:
        raise DomainError("policy row is not on the simplex")
    return row


# ---------------------------------------------------------------------------
# regularizer kinds


@dataclass(frozen=True)
class Shannon:
    """Negative Shannon entropy."""


@dataclass(frozen=True, eq=False)
class KL:
    """KL divergence to a strictly positive reference distribution."""

    reference: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.reference, dtype=float)
        if d.ndim != 1 or np.any(d <= 0) or abs(d.sum() - 1.0) > SIMPLEX_TOL:
            raise DomainError("KL reference must be a strictly positive distribution")
        object.__setattr__(self, "reference", d)


@dataclass(frozen=True)
class Tsallis:
    """Negative Tsallis entropy ``(||pi||^2 - 1) / 2``."""


@dataclass(frozen=True)
class R2Norm:
    """Twice-regularized norm term ``||pi||_* (alpha_r + alpha_p gamma v_norm)``.

    ``norm`` is the norm of the uncertainty ball; the regularizer uses its dual.
    """

    norm: NormSpec = L2
    alpha_r: float = 0.0
    alpha_p: float = 0.0
    gamma: float = 0.0
    v_norm: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "norm", as_norm(self.norm))
        if min(self.alpha_r, self.alpha_p, self.v_norm) < 0:
            raise DomainError("R2Norm radii and value norm must be non-negative")

    @property
    def weight(self) -> float:
        return self.alpha_r + self.alpha_p * self.gamma * self.v_norm


def _xlogx(p):
    p = np.asarray(p, dtype=float)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def reg_value(kind, policy_row) -> float:
    """``Omega(pi_s)`` with the convention ``0 ln 0 = 0``."""
    pi = check_simplex(policy_row)
    if isinstance(kind, Shannon):
        return float(_xlogx(pi).sum())
    if isinstance(kind, KL):
        pos = pi > 0
        return float(np.sum(pi[pos] * np.log(pi[pos] / kind.reference[pos])))
    if isinstance(kind, Tsallis):
        return 0.5 * (float(pi @ pi) - 1.0)
    if isinstance(kind, R2Norm):
        return norm_eval(pi, kind.norm.dual) * kind.weight
    raise UnsupportedError(f"unknown regularizer {kind!r}")


def tsallis_support(q) -> tuple[np.ndarray, float]:
    """Support set and threshold ``tau`` of the sparsemax map.

    Action ``a_(i)`` (i-th largest) is kept while ``1 + i z_i > sum_{j<=i} z_j``.
    """
    q = np.asarray(q, dtype=float)
    order = np.argsort(-q, kind="stable")
    z = q[order]
    k = np.arange(1, q.size + 1)
    keep = 1.0 + k * z > np.cumsum(z)
    n = int(np.max(k[keep]))
    tau = (z[:n].sum() - 1.0) / n
    return np.sort(order[:n]), float(tau)


def conjugate_value(kind, q_row) -> float:
    q = np.asarray(q_row, dtype=float)
    if isinstance(kind, Shannon):
        return float(logsumexp(q))
    if isinstance(kind, KL):
        return float(logsumexp(q, b=kind.reference))
    if isinstance(kind, Tsallis):
        support, tau = tsallis_support(q)
        return 0.5 + 0.5 * float(np.sum(q[support] ** 2 - tau**2))
    if isinstance(kind, R2Norm):
        pi = conjugate_gradient(kind, q)
        return float(pi @ q) - reg_value(kind, pi)
    raise UnsupportedError(f"unknown regularizer {kind!r}")


def conjugate_gradient(kind, q_row, method: str = "exact") -> np.ndarray:
    """Maximising policy row of ``<pi, q> - Omega(pi)``.

    For :class:`R2Norm`, ``method="exact"`` uses the sort-and-threshold
    solution and ``method="pga"`` runs projected-gradient ascent.
    """
    q = np.asarray(q_row, dtype=float)
    if isinstance(kind, Shannon):
        e = np.exp(q - q.max())
        return e / e.sum()
    if isinstance(kind, KL):
        e = kind.reference * np.exp(q - q.max())
        return e / e.sum()
    if isinstance(kind, Tsallis):
        _, tau = tsallis_support(q)
        return np.maximum(q - tau, 0.0)
    if isinstance(kind, R2Norm):
        terms = [(kind.weight, kind.norm.dual.p)]
        if method == "exact":
            return norm_regularized_argmax(q, terms)
        if method == "pga":
            return pga_argmax(q, terms)
        raise DomainError(f"unknown method {method!r}")
    raise UnsupportedError(f"unknown regularizer {kind!r}")


# ---------------------------------------------------------------------------
# max_pi <pi, q> - sum_i w_i ||pi||_{p_i} over the simplex


def _active_terms(terms):
    # ||pi||_1 == 1 on the simplex, so l1 terms only shift the objective
    return [(float(w), float(p)) for w, p in terms if w > 0 and p != 1.0]


def _one_hot(q):
    out = np.zeros_like(q)
    out[int(np.argmax(q))] = 1.0
    return out


def l2_regularized_argmax(q, weight: float) -> np.ndarray:
    """Exact maximiser of ``<pi, q> - weight ||pi||_2`` over the simplex.

    The optimum is ``(q - nu)_+`` normalised, where ``nu`` solves
    ``||(q - nu)_+||_2 = weight``.
    """
    q = np.asarray(q, dtype=float)
    if weight <= 0:
        return _one_hot(q)
    order = np.argsort(-q, kind="stable")
    z = q[order] - q[order[0]]
    # largest k with sum_{i<=k} (z_i - z_k)^2 < weight^2
    csum, csq = np.cumsum(z), np.cumsum(z * z)
    k_all = np.arange(1, z.size + 1)
    gap = csq - 2 * z * csum + k_all * z * z
    k = int(np.max(k_all[gap < weight * weight]))
    s, sq = csum[k - 1], csq[k - 1]
    disc = max(s * s - k * (sq - weight * weight), 0.0)
    nu = (s - math.sqrt(disc)) / k
    u = np.maximum(z - nu, 0.0)
    u[k:] = 0.0
    out = np.zeros_like(q)
    out[order] = u / u.sum()
    return out


def linf_regularized_argmax(q, weight: float) -> np.ndarray:
    """Exact maximiser of ``<pi, q> - weight ||pi||_inf``: uniform on the top k."""
    q = np.asarray(q, dtype=float)
    order = np.argsort(-q, kind="stable")
    k_all = np.arange(1, q.size + 1)
    vals = (np.cumsum(q[order]) - weight) / k_all
    k = int(np.argmax(vals)) + 1
    out = np.zeros_like(q)
    out[order[:k]] = 1.0 / k
    return out


def norm_regularized_argmax(q, terms) -> np.ndarray:
    """Exact greedy row for a weighted sum of dual norms.

    ``terms`` is a sequence of ``(weight, p)`` pairs. Any number of l1 terms
    is allowed alongside at most one l2 or one l_inf term.
    """
    q = np.asarray(q, dtype=float)
    active = _active_terms(terms)
    if not active:
        return _one_hot(q)
    kinds = {p for _, p in active}
    if len(kinds) > 1:
        raise UnsupportedError("mixing l2 and l_inf dual norms in one greedy step")
    w = sum(w for w, _ in active)
    if kinds == {2.0}:
        return l2_regularized_argmax(q, w)
    return linf_regularized_argmax(q, w)


def pga_argmax(q, terms, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Projected-gradient ascent for the smooth (l1 / l2) case.

    Step ``1/L`` with ``L = 1 + w sqrt(A)``, which bounds the curvature of
    ``w ||pi||_2`` on the simplex. Stops once the objective gains less than
    ``tol`` in one step.
    """
    q = np.ascontiguousarray(q, dtype=float)
    active = _active_terms(terms)
    if any(p != 2.0 for _, p in active):
        raise UnsupportedError("projected-gradient ascent needs a smooth regularizer")
    w = sum(w for w, _ in active)
    if w == 0:
        return _one_hot(q)
    pi, n_iter, converged = kernels.pga_l2_argmax(q, w, tol, max_iter)
    if not converged:
        raise SolverError(f"projected-gradient ascent did not converge in {n_iter} steps",
                          best_value=float(pi @ q - w * np.linalg.norm(pi)))
    return pi


# ---------------------------------------------------------------------------
# policy-dependent reward-uncertainty sets


def interval_lower_bounds(kind, policy_row) -> np.ndarray:
    """Finite endpoints ``L(a)`` of the reward intervals ``[L(a), +inf)``."""
    pi = check_simplex(policy_row)
    if isinstance(kind, (Shannon, KL)):
        if np.any(pi <= 0):
            raise DomainError("entropy-induced sets are unbounded at boundary policies")
        lower = np.log(1.0 / pi)
        if isinstance(kind, KL):
            lower = lower + np.log(kind.reference)
        return lower
    if isinstance(kind, Tsallis):
        return (1.0 - pi) / 2.0
    raise UnsupportedError(f"{kind!r} does not induce an interval reward set")


def support_entropy_set(kind, policy_row) -> float:
    """``sigma_{R_s(pi)}(-pi_s)`` for the interval sets induced by ``kind``.

    Each coordinate maximises ``-r(a) pi(a)`` over ``r(a) >= L(a)``; with
    ``pi(a) >= 0`` the maximum sits at the finite endpoint.
    """
    lower = interval_lower_bounds(kind, policy_row)
    y = -np.asarray(policy_row, dtype=float)
    total = 0.0
    for l_a, y_a in zip(lower, y):
        if y_a > 0:
            return math.inf
        total += l_a * y_a
    return total
