"""Tabular q-learning: vanilla, robust and R2 variants.

The online loop runs in the compiled kernel (or its Python twin) in blocks
of ``log_every`` steps; one :class:`RunRecord` row is written per block.
All randomness of the loop is pre-drawn from the run's generator as a
``(steps, 4)`` array of uniforms ``[explore, action, next_state, reset]``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DomainError, StateError, UnsupportedError
from .mdp import TabularMdp, fixed_point, q_from_v
from .regularizers import L2, NormSpec, as_norm, norm_eval
from .robust import ClosedForm, Iterative, UncertaintySpec

CSV_FIELDS = ("schema_version", "step", "episode", "return", "delta", "wall_time_ns",
              "update_ns", "variant", "seed")
SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Exact:
    """Recompute ``||max_b q(., b)||`` from the full table."""


@dataclass(frozen=True)
class Batch:
    """Estimate the value norm from replay batches (moving average).

    The estimate is refreshed every ``refresh`` environment steps.
    """

    batch_size: int = 128
    beta: float = 0.1
    capacity: int = 10_000
    refresh: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.capacity < 1 or self.refresh < 1:
            raise DomainError("batch_size, capacity and refresh must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise DomainError("beta must lie in [0, 1]")


@dataclass(frozen=True)
class LearningConfig:
    """Schedules: ``beta_t(s,a) = (1 + n(s,a))^-lr_power`` with ``n`` the prior
    visits, and ``eps = max(eps_min, eps0 * eps_decay^episode)``."""

    max_steps: int = 200_000
    seed: int = 0
    lr_power: float = 0.75
    eps0: float = 1.0
    eps_decay: float = 0.995
    eps_min: float = 0.05
    norm_mode: Exact | Batch = field(default_factory=Exact)
    log_every: int = 1000
    max_episode_steps: int = 1000
    exploring_starts: bool = False

    def __post_init__(self):
        if self.max_steps < 1 or self.log_every < 1 or self.max_episode_steps < 1:
            raise DomainError("max_steps, log_every, max_episode_steps must be >= 1")
        if not 0.5 < self.lr_power <= 1.0:
            raise DomainError("lr_power must lie in (0.5, 1] for Robbins-Monro steps")
        for name in ("eps0", "eps_decay", "eps_min"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise DomainError(f"{name} must lie in [0, 1]")


def step_size(n_visits, lr_power: float = 0.75):
    return (1.0 + np.asarray(n_visits, dtype=float)) ** (-lr_power)


def epsilon_at(cfg: LearningConfig, episode: int) -> float:
    return max(cfg.eps_min, cfg.eps0 * cfg.eps_decay ** episode)


@dataclass(frozen=True)
class Vanilla:
    name = "vanilla"


@dataclass(frozen=True)
class R2:
    spec: UncertaintySpec
    name = "r2"


@dataclass(frozen=True)
class Robust:
    spec: UncertaintySpec
    solver: ClosedForm | Iterative = field(default_factory=ClosedForm)
    name = "robust"


# ---------------------------------------------------------------------------
# TD error and value-norm estimation


def r2_td(q, transition, alpha_r: float, alpha_p: float, gamma: float,
          v_norm: float) -> float:
    """R2 temporal difference for one ``(s, a, r, s', done)`` record.

    Terminal records drop the bootstrap term but keep the penalties.
    """
    s, a, r, s2, done = transition
    q = np.asarray(q, dtype=float)
    target = r if done else r + gamma * q[s2].max()
    return float(target - alpha_r - gamma * alpha_p * v_norm - q[s, a])


def exact_v_norm(q, norm: NormSpec = L2) -> float:
    """``||max_b q(., b)||_*`` where ``norm`` is the transition-ball norm."""
    return norm_eval(np.asarray(q, dtype=float).max(axis=1), as_norm(norm).dual)


class ReplayBuffer:
    """Fixed-capacity FIFO of ``(s, a, r, s', done)`` records."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise DomainError("capacity must be >= 1")
        self.capacity = int(capacity)
        self._s = np.zeros(capacity, dtype=np.int64)
        self._a = np.zeros(capacity, dtype=np.int64)
        self._r = np.zeros(capacity)
        self._s2 = np.zeros(capacity, dtype=np.int64)
        self._done = np.zeros(capacity, dtype=bool)
        self._next = 0
        self._size = 0

    def __len__(self):
        return self._size

    def push(self, s, a, r, s2, done):
        self.push_many([s], [a], [r], [s2], [done])

    def push_many(self, s, a, r, s2, done):
        n = len(s)
        if n >= self.capacity:
            s, a, r, s2, done = (np.asarray(x)[-self.capacity:] for x in (s, a, r, s2, done))
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self._s[idx], self._a[idx], self._r[idx] = s, a, r
        self._s2[idx], self._done[idx] = s2, done
        self._next = int((self._next + n) % self.capacity)
        self._size = min(self._size + n, self.capacity)

    def records(self):
        order = (self._next - self._size + np.arange(self._size)) % self.capacity
        return (self._s[order], self._a[order], self._r[order], self._s2[order],
                self._done[order])

    def states(self) -> np.ndarray:
        """States of all held records, in storage order."""
        return self._s[:self._size]

    def sample_states(self, batch_size: int, rng) -> np.ndarray:
        if self._size == 0:
            raise StateError("cannot sample from an empty replay buffer")
        return self._s[rng.integers(self._size, size=batch_size)]


@dataclass
class NormEstimator:
    """Moving average of squared value-norm estimates.

    ``beta`` is the weight of the newest batch: small values give a smooth,
    slowly adapting estimate. The first batch initialises the average.
    """

    beta: float
    current_estimate_sq: float = 0.0
    n_updates: int = 0

    @property
    def estimate(self) -> float:
        return math.sqrt(self.current_estimate_sq)


def batch_norm_sq(v, states, buffer_states) -> float:
    """Occurrence-weighted batch estimate of ``||v||_2^2``.

    Each draw is weighted by ``1 / p(s)`` with ``p(s)`` the state's frequency
    in the buffer, so frequently visited states do not dominate: in
    expectation this is ``sum_s v(s)^2`` over every state held in the buffer.
    """
    states = np.asarray(states)
    buffer_states = np.asarray(buffer_states)
    v = np.asarray(v, dtype=float)
    freq = np.bincount(buffer_states, minlength=v.size) / buffer_states.size
    uniq, counts = np.unique(states, return_counts=True)
    return float(np.sum(counts / states.size * v[uniq] ** 2 / freq[uniq]))


def batch_norm_update(est: NormEstimator, buffer: ReplayBuffer, q, batch_size: int,
                      rng) -> NormEstimator:
    if len(buffer) == 0:
        raise StateError("cannot estimate a norm from an empty replay buffer")
    v = np.asarray(q, dtype=float).max(axis=1)
    batch = batch_norm_sq(v, buffer.sample_states(batch_size, rng), buffer.states())
    if est.n_updates == 0:
        new = batch
    else:
        new = (1.0 - est.beta) * est.current_estimate_sq + est.beta * batch
    return NormEstimator(est.beta, new, est.n_updates + 1)


# ---------------------------------------------------------------------------
# run record


@dataclass
class RunRecord:
    variant: str
    seed: int
    backend: str = kernels.BACKEND
    steps: list = field(default_factory=list)
    episodes: list = field(default_factory=list)
    returns: list = field(default_factory=list)
    deltas: list = field(default_factory=list)
    wall_time_ns: list = field(default_factory=list)
    update_ns: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    solver_failures: int = 0
    norm_estimates: list = field(default_factory=list)

    def rows(self):
        for i in range(len(self.steps)):
            yield {
                "schema_version": SCHEMA_VERSION,
                "step": self.steps[i],
                "episode": self.episodes[i],
                "return": self.returns[i],
                "delta": self.deltas[i],
                "wall_time_ns": self.wall_time_ns[i],
                "update_ns": self.update_ns[i],
                "variant": self.variant,
                "seed": self.seed,
            }

    def value_streams(self):
        """Everything except timings; identical across reruns with one seed."""
        return (self.steps, self.episodes, self.returns, self.deltas,
                self.episode_returns, self.norm_estimates)

    @property
    def median_update_ns(self) -> float:
        return float(np.median(self.update_ns)) if self.update_ns else math.nan


# ---------------------------------------------------------------------------
# learning loop


def _variant_arrays(env, variant):
    shape = (env.n_states, env.n_actions)
    if isinstance(variant, Vanilla):
        return kernels.VANILLA, np.zeros(shape), np.zeros(shape), L2, None
    spec = variant.spec
    if not spec.is_sa:
        raise UnsupportedError("q-learning supports (s,a)-rectangular sets only")
    ar = np.ascontiguousarray(spec.reward_radius, dtype=float)
    ap = np.ascontiguousarray(spec.transition_radius, dtype=float)
    if ar.shape != shape:
        raise DomainError(f"radii must have shape {shape}")
    if isinstance(variant, R2):
        return kernels.R2, ar, ap, spec.transition_norm, None
    if isinstance(variant, Robust):
        if isinstance(variant.solver, ClosedForm):
            return kernels.ROBUST_CLOSED, ar, ap, spec.transition_norm, None
        return kernels.ROBUST_ITERATIVE, ar, ap, spec.transition_norm, variant.solver
    raise DomainError(f"unknown variant {variant!r}")


def _start_tables(env, exploring: bool):
    tab = env.sampler
    if not exploring:
        return tab["start_states"], tab["start_cum"]
    states = np.flatnonzero(~env.terminal_mask).astype(np.int64)
    cum = np.arange(1, states.size + 1, dtype=float) / states.size
    cum[-1] = 1.0
    return states, cum


def q_learning(env, cfg: LearningConfig, variant=Vanilla(), q0=None):
    """Online q-learning on ``env``; returns ``(q, RunRecord)``."""
    code, ar, ap, tnorm, solver = _variant_arrays(env, variant)
    solver = solver or Iterative()
    tab = env.sampler
    starts, start_cum = _start_tables(env, cfg.exploring_starts)
    n_s, n_a = env.n_states, env.n_actions
    rng = np.random.default_rng(cfg.seed)
    q = np.zeros((n_s, n_a)) if q0 is None else np.array(q0, dtype=float)
    v = q.max(axis=1)
    visits = np.zeros((n_s, n_a), dtype=np.int64)
    first = np.searchsorted(start_cum, rng.random(), side="right")
    istate = np.array([starts[min(first, starts.size - 1)], 0, 0, 0], dtype=np.int64)
    fstate = np.zeros(1)
    batch = cfg.norm_mode if isinstance(cfg.norm_mode, Batch) else None
    if batch and code == kernels.R2 and tnorm.p != 2.0:
        raise UnsupportedError("batch norm estimation needs l2 transition balls")
    exact = batch is None
    buffer = ReplayBuffer(batch.capacity) if batch else None
    est = NormEstimator(batch.beta) if batch else None
    norm_rng = np.random.default_rng([cfg.seed, 1])
    rec = RunRecord(variant.name, cfg.seed)
    gamma = env.gamma
    sub = batch.refresh if batch else cfg.log_every
    buf = {k: np.empty(sub, dtype=t) for k, t in (
        ("delta", float), ("s", np.int64), ("a", np.int64), ("r", float), ("s2", np.int64),
        ("done", np.uint8), ("ep", float))}
    last_return = math.nan
    wall = 0
    done_steps = 0
    while done_steps < cfg.max_steps:
        block = min(cfg.log_every, cfg.max_steps - done_steps)
        block_ns = 0
        abs_delta = 0.0
        left = block
        while left > 0:
            n = min(sub, left)
            u = rng.random((n, 4))
            views = {k: a[:n] for k, a in buf.items()}
            v_norm_given = est.estimate if (batch and est.n_updates) else 0.0
            t0 = time.perf_counter_ns()
            kernels.qlearn_block(
                q, visits, v, tab["ptr"], tab["next"], tab["cum"], tab["reward"],
                tab["terminal"], starts, start_cum, ar, ap, gamma, code,
                kernels.norm_code(tnorm.p), exact, v_norm_given, solver.step, solver.tol,
                solver.max_iter, cfg.eps0, cfg.eps_decay, cfg.eps_min,
                cfg.max_episode_steps, cfg.lr_power, u, istate, fstate, views["delta"],
                views["s"], views["a"], views["r"], views["s2"], views["done"], views["ep"])
            block_ns += time.perf_counter_ns() - t0
            abs_delta += float(np.abs(views["delta"]).sum())
            ended = views["ep"][~np.isnan(views["ep"])]
            if ended.size:
                rec.episode_returns.extend(ended.tolist())
                last_return = float(ended[-1])
            if batch:
                buffer.push_many(views["s"], views["a"], views["r"], views["s2"],
                                 views["done"].astype(bool))
                est = batch_norm_update(est, buffer, q, batch.batch_size, norm_rng)
            if not np.all(np.isfinite(q)):
                raise StateError("q-table became non-finite")
            left -= n
        done_steps += block
        wall += block_ns
        rec.steps.append(done_steps)
        rec.episodes.append(int(istate[1]))
        rec.returns.append(last_return)
        rec.deltas.append(abs_delta / block)
        rec.wall_time_ns.append(wall)
        rec.update_ns.append(block_ns / block)
        if batch:
            rec.norm_estimates.append(est.estimate)
    rec.solver_failures = int(istate[3])
    return q, rec


def greedy_actions(q) -> np.ndarray:
    return np.asarray(q).argmax(axis=1)


# ---------------------------------------------------------------------------
# model-based reference and evaluation


def r2_optimal_q(env_or_mdp, spec: UncertaintySpec, tol: float = 1e-12) -> np.ndarray:
    """Fixed point of the (s,a)-rectangular R2 optimality operator on q-tables.

    Terminal states keep value zero, matching the episodic learning loop,
    so their rows are left at zero.
    """
    mdp = env_or_mdp if isinstance(env_or_mdp, TabularMdp) else env_or_mdp.to_tabular_mdp()
    if not spec.is_sa:
        raise UnsupportedError("needs an (s,a)-rectangular set")
    term = mdp.terminal
    dual = spec.transition_norm.dual

    def op(v):
        q = (q_from_v(mdp, v) - spec.reward_radius
             - mdp.discount * spec.transition_radius * norm_eval(v, dual))
        out = q.max(axis=1)
        out[term] = 0.0
        return out

    v, _ = fixed_point(op, np.zeros(mdp.n_states), tol)
    q = (q_from_v(mdp, v) - spec.reward_radius
         - mdp.discount * spec.transition_radius * norm_eval(v, dual))
    q[term] = 0.0
    return q


@dataclass(frozen=True)
class RolloutStats:
    mean: float
    std: float
    mean_discounted: float
    std_discounted: float
    episodes: int
    truncated: int


def evaluate_policy_rollouts(env, policy, episodes: int, seed: int,
                             max_steps: int = 1000) -> RolloutStats:
    """Monte-Carlo returns of a deterministic policy.

    ``policy`` is an action per state or an ``(S, A)`` table whose row-wise
    argmax is followed. Every episode consumes one uniform per step whether or
    not it is still running, so policies compared under one seed share noise.
    """
    if episodes < 1:
        raise DomainError("episodes must be >= 1")
    pol = np.asarray(policy)
    actions = pol.argmax(axis=1) if pol.ndim == 2 else pol.astype(int)
    if actions.shape != (env.n_states,):
        raise DomainError("policy does not match the env")
    rng = np.random.default_rng(seed)
    tab = env.sampler
    starts, start_cum = tab["start_states"], tab["start_cum"]
    cum = np.cumsum(env.transition, axis=2)
    cum[..., -1] = 1.0
    R = env.arrival_reward
    term = env.terminal_mask
    idx = np.minimum(np.searchsorted(start_cum, rng.random(episodes), side="right"),
                     starts.size - 1)
    s = starts[idx]
    active = ~term[s]
    ret = np.zeros(episodes)
    disc_ret = np.zeros(episodes)
    disc = 1.0
    for _ in range(max_steps):
        if not active.any():
            break
        u = rng.random(episodes)
        a = actions[s]
        s2 = (u[:, None] < cum[s, a]).argmax(axis=1)
        r = np.where(active, R[s, s2], 0.0)
        ret += r
        disc_ret += disc * r
        disc *= env.gamma
        s = np.where(active, s2, s)
        active &= ~term[s]
    return RolloutStats(float(ret.mean()), float(ret.std()), float(disc_ret.mean()),
                        float(disc_ret.std()), episodes, int(active.sum()))
