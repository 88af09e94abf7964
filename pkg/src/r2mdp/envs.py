"""Grid-world benchmarks usable as explicit models and as simulators.

Cells are indexed ``row * n_cols + col``. Actions are 0 up, 1 right, 2 down,
3 left; moves into the border leave the agent in place. With probability
``slip`` the move direction is drawn uniformly from the four actions instead
of the chosen one. Rewards are paid on arrival: entering a terminal cell pays
its terminal reward, any other move pays ``step_reward``. Terminal cells are
absorbing with zero reward in the exported model.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources

import numpy as np

from .errors import DomainError, StateError
from .mdp import TabularMdp

MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
N_ACTIONS = len(MOVES)


@dataclass(frozen=True)
class EnvStep:
    next_state: int
    reward: float
    done: bool


@dataclass(frozen=True)
class GridWorld:
    n_rows: int
    n_cols: int
    terminals: tuple = ()
    step_reward: float = 0.0
    slip: float = 0.0
    start: tuple | None = None
    gamma: float = 0.9

    def __post_init__(self):
        if self.n_rows < 1 or self.n_cols < 1:
            raise DomainError("grid needs at least one cell")
        if not 0.0 <= self.slip <= 1.0:
            raise DomainError(f"slip must lie in [0, 1], got {self.slip}")
        terms = tuple((tuple(int(x) for x in cell), float(r)) for cell, r in self.terminals)
        object.__setattr__(self, "terminals", terms)
        for cell, _ in terms:
            self._check_cell(cell)
        if self.start is not None:
            start = tuple(tuple(int(x) for x in c) for c in self.start)
            for c in start:
                self._check_cell(c)
                if self.index(c) in self.terminal_rewards:
                    raise DomainError(f"start cell {c} is terminal")
            object.__setattr__(self, "start", start)

    def _check_cell(self, cell):
        r, c = cell
        if not (0 <= r < self.n_rows and 0 <= c < self.n_cols):
            raise DomainError(f"cell {cell} is outside the grid")

    @property
    def n_states(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    def index(self, cell) -> int:
        return int(cell[0]) * self.n_cols + int(cell[1])

    def cell(self, s: int) -> tuple:
        return divmod(int(s), self.n_cols)

    @cached_property
    def terminal_rewards(self) -> dict:
        return {self.index(c): r for c, r in self.terminals}

    @cached_property
    def terminal_mask(self) -> np.ndarray:
        m = np.zeros(self.n_states, dtype=bool)
        m[list(self.terminal_rewards)] = True
        return m

    @cached_property
    def start_dist(self) -> np.ndarray:
        mu = np.zeros(self.n_states)
        if self.start is None:
            mu[~self.terminal_mask] = 1.0
        else:
            for c in self.start:
                mu[self.index(c)] += 1.0
        return mu / mu.sum()

    def _move(self, s, d):
        r, c = self.cell(s)
        dr, dc = MOVES[d]
        r2, c2 = r + dr, c + dc
        if 0 <= r2 < self.n_rows and 0 <= c2 < self.n_cols:
            return r2 * self.n_cols + c2
        return s

    @cached_property
    def transition(self) -> np.ndarray:
        n = self.n_states
        P = np.zeros((n, N_ACTIONS, n))
        for s in range(n):
            if self.terminal_mask[s]:
                P[s, :, s] = 1.0
                continue
            for a in range(N_ACTIONS):
                P[s, a, self._move(s, a)] += 1.0 - self.slip
                for d in range(N_ACTIONS):
                    P[s, a, self._move(s, d)] += self.slip / N_ACTIONS
        P.setflags(write=False)
        return P

    @cached_property
    def arrival_reward(self) -> np.ndarray:
        """Reward ``R[s, s']`` paid when moving from non-terminal ``s`` to ``s'``."""
        row = np.full(self.n_states, self.step_reward)
        for s, r in self.terminal_rewards.items():
            row[s] = r
        R = np.tile(row, (self.n_states, 1))
        R[self.terminal_mask] = 0.0
        return R

    @cached_property
    def sampler(self) -> dict:
        """Sparse inverse-CDF tables shared by ``step`` and the learning kernel."""
        P = self.transition
        n, n_a = self.n_states, N_ACTIONS
        ptr = np.zeros(n * n_a + 1, dtype=np.int64)
        nxt, cum, rew = [], [], []
        for s in range(n):
            for a in range(n_a):
                idx = np.flatnonzero(P[s, a] > 0)
                c = np.cumsum(P[s, a, idx])
                c[-1] = 1.0
                nxt.extend(idx.tolist())
                cum.extend(c.tolist())
                rew.extend(self.arrival_reward[s, idx].tolist())
                ptr[s * n_a + a + 1] = len(nxt)
        starts = np.flatnonzero(self.start_dist > 0)
        start_cum = np.cumsum(self.start_dist[starts])
        start_cum[-1] = 1.0
        return {
            "ptr": ptr,
            "next": np.array(nxt, dtype=np.int64),
            "cum": np.array(cum),
            "reward": np.array(rew),
            "terminal": self.terminal_mask.astype(np.uint8),
            "start_states": starts.astype(np.int64),
            "start_cum": start_cum,
        }

    def to_tabular_mdp(self) -> TabularMdp:
        P = self.transition
        r = np.einsum("sat,st->sa", P, self.arrival_reward)
        return TabularMdp(P, r, self.gamma, self.start_dist, self.terminal_mask)

    def reset(self, rng: np.random.Generator) -> int:
        tab = self.sampler
        j = int(np.searchsorted(tab["start_cum"], rng.random(), side="right"))
        return int(tab["start_states"][min(j, len(tab["start_states"]) - 1)])

    def step(self, state: int, action: int, rng: np.random.Generator) -> EnvStep:
        if not 0 <= action < N_ACTIONS:
            raise DomainError(f"action {action} out of range")
        if self.terminal_mask[state]:
            raise StateError(f"state {state} is terminal")
        tab = self.sampler
        k = state * N_ACTIONS + action
        lo, hi = tab["ptr"][k], tab["ptr"][k + 1]
        j = lo + int(np.searchsorted(tab["cum"][lo:hi], rng.random(), side="right"))
        j = min(j, hi - 1)
        s2 = int(tab["next"][j])
        return EnvStep(s2, float(tab["reward"][j]), bool(self.terminal_mask[s2]))

    def perturb(self, new_slip: float) -> "GridWorld":
        """Same layout under a different slip probability."""
        return dataclasses.replace(self, slip=float(new_slip))

    def to_layout(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "terminals": [{"cell": list(c), "reward": r} for c, r in self.terminals],
            "step_reward": self.step_reward,
            "slip": self.slip,
            "start": None if self.start is None else [list(c) for c in self.start],
            "gamma": self.gamma,
            "kind": "grid",
        }


@dataclass(frozen=True)
class MazeEnv(GridWorld):
    """5x5 deterministic maze with two absorbing goals in opposite corners."""

    n_rows: int = 5
    n_cols: int = 5
    terminals: tuple = (((0, 0), 1.0), ((4, 4), 10.0))
    step_reward: float = 0.0
    slip: float = 0.0
    start: tuple | None = None
    gamma: float = 0.9

    def to_layout(self) -> dict:
        return {**super().to_layout(), "kind": "maze"}


# rocks flank the diagonal corridor; see layouts/mars_rover.json
MARS_ROCKS = tuple((i, i + 2) for i in range(1, 7)) + tuple((i + 2, i) for i in range(1, 7))


@dataclass(frozen=True)
class MarsRoverEnv(GridWorld):
    """10x10 rover grid: reach the goal, avoid rocks."""

    n_rows: int = 10
    n_cols: int = 10
    goal: tuple = (9, 9)
    rocks: tuple = MARS_ROCKS
    r_success: float = 1.0
    r_fail: float = -1.0
    step_reward: float = -0.01
    slip: float = 0.0
    start: tuple | None = ((0, 0),)
    gamma: float = 0.9
    terminals: tuple = field(default=(), init=False)

    def __post_init__(self):
        if not self.r_success > 0 > self.step_reward > self.r_fail:
            raise DomainError("rewards must satisfy r_success > 0 > r_step > r_fail")
        goal = tuple(int(x) for x in self.goal)
        rocks = tuple(tuple(int(x) for x in c) for c in self.rocks)
        if goal in rocks:
            raise DomainError("goal cell cannot hold a rock")
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "rocks", rocks)
        object.__setattr__(self, "terminals",
                           ((goal, self.r_success),) + tuple((c, self.r_fail) for c in rocks))
        super().__post_init__()

    def to_layout(self) -> dict:
        d = super().to_layout()
        del d["terminals"]
        d.update(kind="mars_rover", goal=list(self.goal), rocks=[list(c) for c in self.rocks],
                 r_success=self.r_success, r_fail=self.r_fail)
        return d


def to_tabular_mdp(env: GridWorld) -> TabularMdp:
    return env.to_tabular_mdp()


def perturb(env: GridWorld, new_epsilon: float) -> GridWorld:
    return env.perturb(new_epsilon)


def env_from_layout(d: dict) -> GridWorld:
    """Build an env from the layout JSON schema (see README)."""
    d = dict(d)
    kind = d.pop("kind", "grid")
    if kind == "mars_rover":
        if "start" in d and d["start"] is not None:
            d["start"] = tuple(tuple(c) for c in d["start"])
        d["goal"] = tuple(d.get("goal", (9, 9)))
        d["rocks"] = tuple(tuple(c) for c in d.get("rocks", MARS_ROCKS))
        return MarsRoverEnv(**d)
    if kind not in ("maze", "grid"):
        raise DomainError(f"unknown layout kind {kind!r}")
    if "terminals" in d:
        d["terminals"] = tuple((tuple(t["cell"]), t["reward"]) for t in d["terminals"])
    return (MazeEnv if kind == "maze" else GridWorld)(**d)


def load_layout(path) -> GridWorld:
    with open(path) as fh:
        return env_from_layout(json.load(fh))


def builtin_layout(name: str) -> GridWorld:
    """``"maze"`` or ``"mars_rover"`` from the packaged layout files."""
    try:
        text = resources.files("r2mdp").joinpath("layouts", f"{name}.json").read_text()
    except FileNotFoundError:
        raise DomainError(f"no built-in layout {name!r}") from None
    return env_from_layout(json.loads(text))


def make_env(name: str, **overrides) -> GridWorld:
    env = builtin_layout(name)
    return dataclasses.replace(env, **overrides) if overrides else env
