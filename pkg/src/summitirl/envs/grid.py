"""Square grid world with wall-shaped binary features and a goal at the center.

The agent enters cell ``s`` and receives ``theta @ phi(s) + r_step``; entering
the goal yields ``r_goal`` and ends the episode.  Each move fails with
probability ``p_slip``, in which case the agent lands on a uniformly random
in-grid neighbour (the intended one included).  A move that would leave the
grid keeps the agent in place.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import numba
import numpy as np

from ..types import GridSummary, Trajectory
from .base import Environment

UP, DOWN, LEFT, RIGHT = 0, 1, 2, 3
ACTION_NAMES = ("up", "down", "left", "right")
_DELTAS = ((0, -1), (0, 1), (-1, 0), (1, 0))
_MAX_OUTCOMES = 5


@dataclass(frozen=True, eq=False)
class GridWorld(Environment):
    w: int
    n_features: int
    seed: int
    features: np.ndarray = field(repr=False)
    p_slip: float = 0.05
    r_step: float = -0.05
    r_goal: float = 1.0
    theta: tuple[float, ...] = ()
    t_max_factor: int = 10
    start_cells: tuple[int, ...] | None = None

    has_transition_pmf = True

    def __post_init__(self) -> None:
        if self.w < 3 or self.w % 2 == 0:
            raise ValueError(f"grid width must be odd and >= 3, got {self.w}")
        if not 0.0 <= self.p_slip <= 1.0:
            raise ValueError(f"p_slip must lie in [0, 1], got {self.p_slip}")
        theta = tuple(float(t) for t in (self.theta if len(self.theta) else np.zeros(self.n_features)))
        if len(theta) != self.n_features:
            raise ValueError(f"theta has {len(theta)} entries, grid has {self.n_features} features")
        object.__setattr__(self, "theta", theta)
        feats = np.asarray(self.features, dtype=np.int8).reshape(self.w * self.w, self.n_features)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        if self.start_cells is not None:
            starts = tuple(int(s) for s in self.start_cells)
            if not starts or any(s == self.goal or not 0 <= s < self.n_states for s in starts):
                raise ValueError("start_cells must be non-empty non-goal cells")
            object.__setattr__(self, "start_cells", starts)
        object.__setattr__(self, "_cache", {})

    # -- geometry ------------------------------------------------------------
    @property
    def n_states(self) -> int:
        return self.w * self.w

    @property
    def n_actions(self) -> int:
        return 4

    @property
    def t_max(self) -> int:
        return self.t_max_factor * self.w

    @property
    def goal(self) -> int:
        c = (self.w - 1) // 2
        return self.cell(c, c)

    def cell(self, x: int, y: int) -> int:
        return y * self.w + x

    def xy(self, s: int) -> tuple[int, int]:
        return s % self.w, s // self.w

    def boundary_cells(self) -> tuple[int, ...]:
        edge = (0, self.w - 1)
        return tuple(s for s in range(self.n_states) if self.xy(s)[0] in edge or self.xy(s)[1] in edge)

    def initial_cells(self) -> tuple[int, ...]:
        return self.start_cells if self.start_cells is not None else self.boundary_cells()

    def initial_prob(self, s: int) -> float:
        cells = self.initial_cells()
        return 1.0 / len(cells) if s in cells else 0.0

    def distance_to_goal(self) -> np.ndarray:
        """Manhattan distance from every cell to the goal."""
        c = (self.w - 1) // 2
        ys, xs = np.divmod(np.arange(self.n_states), self.w)
        return np.abs(xs - c) + np.abs(ys - c)

    def neighbours(self, s: int) -> list[int]:
        x, y = self.xy(s)
        out = []
        for dx, dy in _DELTAS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < self.w and 0 <= ny < self.w:
                out.append(self.cell(nx, ny))
        return out

    # -- dynamics ------------------------------------------------------------
    def is_terminal(self, state: int) -> bool:
        return state == self.goal

    def rewards(self) -> np.ndarray:
        """Reward for entering each cell."""
        r = self.features @ np.asarray(self.theta, dtype=float) + self.r_step
        r[self.goal] = self.r_goal
        return r

    def reward(self, state: int, action: int, next_state: int) -> float:
        return float(self.rewards()[next_state])

    def transition_pmf(self, state: int, action: int) -> dict[int, float]:
        if self.is_terminal(state):
            raise ValueError("the goal cell is terminal and has no transitions")
        if action not in (UP, DOWN, LEFT, RIGHT):
            raise ValueError(f"unknown action {action}")
        x, y = self.xy(state)
        dx, dy = _DELTAS[action]
        nx, ny = x + dx, y + dy
        intended = self.cell(nx, ny) if 0 <= nx < self.w and 0 <= ny < self.w else state
        pmf = {intended: 1.0 - self.p_slip}
        nbs = self.neighbours(state)
        for nb in nbs:
            pmf[nb] = pmf.get(nb, 0.0) + self.p_slip / len(nbs)
        return {s: p for s, p in pmf.items() if p > 0.0}

    def transition_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Successor ids, cumulative probabilities and outcome counts per ``(s, a)``.

        The goal row is a self-loop so kernels never index out of bounds.
        """
        if "table" not in self._cache:
            n = self.n_states
            succ = np.zeros((n, 4, _MAX_OUTCOMES), dtype=np.int64)
            cum = np.ones((n, 4, _MAX_OUTCOMES), dtype=np.float64)
            count = np.ones((n, 4), dtype=np.int64)
            for s in range(n):
                for a in range(4):
                    if s == self.goal:
                        succ[s, a, 0] = s
                        continue
                    items = sorted(self.transition_pmf(s, a).items())
                    count[s, a] = len(items)
                    c = np.cumsum([p for _, p in items])
                    c[-1] = 1.0
                    succ[s, a, : len(items)] = [t for t, _ in items]
                    cum[s, a, : len(items)] = c
            for arr in (succ, cum, count):
                arr.setflags(write=False)
            self._cache["table"] = (succ, cum, count)
        return self._cache["table"]

    def transition_matrix(self) -> np.ndarray:
        """Dense ``P[s, a, s']``; the goal row is an absorbing self-loop."""
        if "matrix" not in self._cache:
            n = self.n_states
            P = np.zeros((n, 4, n))
            for s in range(n):
                for a in range(4):
                    if s == self.goal:
                        P[s, a, s] = 1.0
                    else:
                        for t, p in self.transition_pmf(s, a).items():
                            P[s, a, t] += p
            P.setflags(write=False)
            self._cache["matrix"] = P
        return self._cache["matrix"]

    def sample_initial_state(self, rng: np.random.Generator) -> int:
        cells = self.initial_cells()
        return int(cells[rng.integers(len(cells))])

    def sample_transition(self, state: int, action: int, rng: np.random.Generator) -> int:
        succ, cum, count = self.transition_table()
        k = int(np.searchsorted(cum[state, action, : count[state, action]], rng.random(), side="right"))
        return int(succ[state, action, min(k, count[state, action] - 1)])

    # -- summaries -----------------------------------------------------------
    def summarize(self, traj: Trajectory) -> GridSummary:
        return summarize_grid(traj, self.w)

    # -- parametrisation -----------------------------------------------------
    def with_theta(self, theta) -> "GridWorld":
        return dataclasses.replace(self, theta=tuple(float(t) for t in np.atleast_1d(theta)))

    def describe(self) -> dict:
        return {
            "env": "grid",
            "w": self.w,
            "n_features": self.n_features,
            "seed": self.seed,
            "p_slip": self.p_slip,
            "r_step": self.r_step,
            "r_goal": self.r_goal,
            "theta": list(self.theta),
            "t_max_factor": self.t_max_factor,
            "start_cells": list(self.start_cells) if self.start_cells is not None else None,
            "features_sha256": hashlib.sha256(self.features.tobytes()).hexdigest()[:16],
        }

    def feature_layers(self) -> np.ndarray:
        """Features as an ``(n_features, w, w)`` array indexed ``[f, y, x]``."""
        return self.features.T.reshape(self.n_features, self.w, self.w)

    # -- fast paths ------------------------------------------------------------
    def q_table_shape(self) -> tuple[int, int]:
        return self.n_states, 4

    def train_q_batch(self, Q: np.ndarray, visits: np.ndarray, params, episodes: int, seed: int) -> None:
        """Run ``episodes`` Q-learning episodes, updating ``Q`` and ``visits`` in place."""
        succ, cum, count = self.transition_table()
        starts = np.asarray(self.initial_cells(), dtype=np.int64)
        _q_learning_kernel(
            Q, visits, succ, cum, count, self.rewards(), self.goal, starts, self.t_max,
            int(episodes), float(params.learning_rate), float(params.discount),
            float(params.exploration_rate), float(params.softmax_temperature),
            params.exploration == "softmax", *params.decay_args(), int(seed),
        )

    def rollout_summaries(self, policy_probs: np.ndarray, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Simulate ``n`` episodes; returns start cells and step counts."""
        succ, cum, count = self.transition_table()
        starts = np.asarray(self.initial_cells(), dtype=np.int64)
        pcum = np.cumsum(policy_probs, axis=1)
        pcum[:, -1] = 1.0
        return _rollout_kernel(succ, cum, count, self.goal, starts, self.t_max, pcum, int(n), int(seed))


def generate_grid(
    w: int,
    n_features: int,
    seed: int,
    *,
    p_slip: float = 0.05,
    r_step: float = -0.05,
    r_goal: float = 1.0,
    theta=None,
    t_max_factor: int = 10,
    start_cells=None,
) -> GridWorld:
    """Build a ``w`` x ``w`` grid whose every feature layer is the union of ``w`` walls.

    A wall joins a random cell to another random cell in the same row or
    column; every cell on the segment gets the feature, except the goal.
    """
    if w < 3 or w % 2 == 0:
        raise ValueError(f"grid width must be odd and >= 3, got {w}")
    if n_features < 0:
        raise ValueError(f"n_features must be non-negative, got {n_features}")
    rng = np.random.default_rng(seed)
    layers = np.zeros((n_features, w, w), dtype=np.int8)
    c = (w - 1) // 2
    for f in range(n_features):
        for _ in range(w):
            x0, y0 = rng.integers(w, size=2)
            if rng.integers(2) == 0:
                x1, y1 = x0, rng.integers(w)
            else:
                x1, y1 = rng.integers(w), y0
            xs = slice(min(x0, x1), max(x0, x1) + 1)
            ys = slice(min(y0, y1), max(y0, y1) + 1)
            layers[f, ys, xs] = 1
        layers[f, c, c] = 0
    features = layers.reshape(n_features, w * w).T.copy()
    return GridWorld(
        w=w,
        n_features=n_features,
        seed=int(seed),
        features=features,
        p_slip=p_slip,
        r_step=r_step,
        r_goal=r_goal,
        theta=tuple(theta) if theta is not None else (),
        t_max_factor=t_max_factor,
        start_cells=tuple(start_cells) if start_cells is not None else None,
    )


def grid_transition_pmf(grid: GridWorld, s: int, a: int) -> dict[int, float]:
    return grid.transition_pmf(s, a)


def summarize_grid(traj: Trajectory, w: int) -> GridSummary:
    """``(start cell, number of actions)``; truncated episodes report ``T_max``."""
    s0 = traj.states[0]
    return GridSummary((s0 % w, s0 // w), traj.length)


@numba.njit(cache=True)
def _sample_outcome(succ, cum, count, s, a):
    u = np.random.random()
    k = 0
    n = count[s, a]
    while k < n - 1 and u >= cum[s, a, k]:
        k += 1
    return succ[s, a, k]


@numba.njit(cache=True)
def _argmax_random_tie(row):
    best = row[0]
    for i in range(1, row.shape[0]):
        if row[i] > best:
            best = row[i]
    n_best = 0
    for i in range(row.shape[0]):
        if row[i] == best:
            n_best += 1
    pick = np.random.randint(n_best)
    for i in range(row.shape[0]):
        if row[i] == best:
            if pick == 0:
                return i
            pick -= 1
    return 0


@numba.njit(cache=True)
def _decay(n, c, power):
    if c <= 0.0:
        return 1.0
    return (1.0 + n / c) ** (-power)


@numba.njit(cache=True)
def _softmax_action(row, tau):
    m = row.max()
    w = np.exp((row - m) / tau)
    u = np.random.random() * w.sum()
    acc = 0.0
    for i in range(row.shape[0]):
        acc += w[i]
        if u < acc:
            return i
    return row.shape[0] - 1


@numba.njit(cache=True)
def _q_learning_kernel(Q, visits, succ, cum, count, reward, goal, starts, t_max, episodes,
                       alpha, gamma, eps, tau, use_softmax, decay_c, decay_pow, seed):
    np.random.seed(seed)
    for _ in range(episodes):
        s = starts[np.random.randint(starts.shape[0])]
        for _t in range(t_max):
            if use_softmax:
                a = _softmax_action(Q[s], tau)
            elif np.random.random() < eps:
                a = np.random.randint(4)
            else:
                a = _argmax_random_tie(Q[s])
            s2 = _sample_outcome(succ, cum, count, s, a)
            r = reward[s2]
            if s2 == goal:
                target = r
            else:
                target = r + gamma * Q[s2].max()
            Q[s, a] += alpha * _decay(visits[s, a], decay_c, decay_pow) * (target - Q[s, a])
            visits[s, a] += 1
            s = s2
            if s == goal:
                break


@numba.njit(cache=True)
def _rollout_kernel(succ, cum, count, goal, starts, t_max, pcum, n, seed):
    np.random.seed(seed)
    start_out = np.empty(n, dtype=np.int64)
    steps_out = np.empty(n, dtype=np.int64)
    for i in range(n):
        s = starts[np.random.randint(starts.shape[0])]
        start_out[i] = s
        t = 0
        while t < t_max and s != goal:
            u = np.random.random()
            a = 0
            while a < 3 and u >= pcum[s, a]:
                a += 1
            s = _sample_outcome(succ, cum, count, s, a)
            t += 1
        steps_out[i] = t
    return start_out, steps_out
