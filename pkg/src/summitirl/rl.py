"""Tabular Q-learning, greedy policy extraction and policy rollouts.

These are the two subroutines the likelihood machinery needs: one that turns
an MDP into a (near) optimal policy and one that simulates that policy.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .envs.grid import GridWorld
from .envs.menu import MenuModel, simulate_menu_episode
from .types import GridSummary, MenuSummary, ObservationSet, Trajectory

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class QLearningParams:
    """Q-learning hyperparameters.

    ``learning_rate`` is the step ``alpha`` of the Q update.  Exploration is
    epsilon-greedy with ``exploration_rate``; ``softmax_temperature`` is only
    used when ``exploration == "softmax"``.  ``batch_size`` episodes form one
    convergence checkpoint.
    """

    episodes: int
    batch_size: int = 500
    learning_rate: float = 0.5
    discount: float = 0.99
    exploration_rate: float = 0.2
    softmax_temperature: float = 0.2
    exploration: str = "epsilon"
    decay_visits: float = 0.0
    decay_power: float = 0.0

    def decay_args(self) -> tuple[float, float]:
        return float(self.decay_visits), float(self.decay_power)

    def __post_init__(self) -> None:
        if self.episodes < 0 or self.batch_size < 1:
            raise ValueError("episodes must be >= 0 and batch_size >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must lie in (0, 1], got {self.discount}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ValueError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if not 0.0 <= self.exploration_rate <= 1.0:
            raise ValueError(f"exploration_rate must lie in [0, 1], got {self.exploration_rate}")
        if self.exploration not in ("epsilon", "softmax"):
            raise ValueError(f"exploration must be 'epsilon' or 'softmax', got {self.exploration!r}")
        if self.softmax_temperature <= 0:
            raise ValueError("softmax_temperature must be positive")

    @classmethod
    def for_grid(cls, w: int, **overrides) -> "QLearningParams":
        base = dict(episodes=2000 * w, batch_size=500, learning_rate=0.5, discount=0.99,
                    exploration_rate=0.2, softmax_temperature=0.2, decay_visits=20.0, decay_power=1.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_menu(cls, paper_scale: bool = False, **overrides) -> "QLearningParams":
        base = dict(episodes=5_000_000 if paper_scale else 200_000, batch_size=10_000,
                    learning_rate=0.3, discount=0.98, exploration_rate=0.1, softmax_temperature=0.05,
                    decay_visits=100.0, decay_power=0.7)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class QTable:
    values: np.ndarray
    visits: np.ndarray
    history: tuple[float, ...] = ()
    meta: dict = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return self.values.shape[0]

    def state_values(self) -> np.ndarray:
        return self.values.max(axis=1)

    def save(self, path: str | Path) -> None:
        np.savez_compressed(path, values=self.values, visits=self.visits,
                            history=np.asarray(self.history), meta=json.dumps(self.meta, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "QTable":
        with np.load(path) as z:
            return cls(z["values"], z["visits"], tuple(z["history"].tolist()), json.loads(str(z["meta"])))


@dataclass(frozen=True, eq=False)
class Policy:
    """Row-stochastic ``probs[state, action]``."""

    probs: np.ndarray

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("policy rows must be probability distributions")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    def __call__(self, state: int) -> np.ndarray:
        return self.probs[state]

    def sample(self, state: int, rng: np.random.Generator) -> int:
        return int(rng.choice(self.probs.shape[1], p=self.probs[state]))


def q_learn(env, params: QLearningParams, rng: np.random.Generator | int) -> QTable:
    """Train a Q-table on ``env`` with zero initialisation.

    Training runs in batches of ``params.batch_size`` episodes; the largest
    absolute Q change of each batch is kept in ``QTable.history``.
    Deterministic given the seed.
    """
    rng = np.random.default_rng(rng)
    Q = np.zeros(env.q_table_shape())
    visits = np.zeros(env.q_table_shape(), dtype=np.int64)
    history = []
    remaining = params.episodes
    while remaining > 0:
        n = min(params.batch_size, remaining)
        before = Q.copy()
        env.train_q_batch(Q, visits, params, n, int(rng.integers(2**62)))
        history.append(float(np.abs(Q - before).max()))
        remaining -= n
    Q.setflags(write=False)
    visits.setflags(write=False)
    meta = {"env": env.digest(), "params": asdict(params)}
    return QTable(Q, visits, tuple(history), meta)


def greedy_policy(q: QTable) -> Policy:
    """Uniform over the maximising actions; unvisited states get a uniform row."""
    values = np.asarray(q.values)
    best = values == values.max(axis=1, keepdims=True)
    probs = best / best.sum(axis=1, keepdims=True)
    unvisited = np.asarray(q.visits).sum(axis=1) == 0
    probs[unvisited] = 1.0 / values.shape[1]
    return Policy(probs)


def default_q_params(env, paper_scale: bool = False) -> QLearningParams:
    if isinstance(env, GridWorld):
        return QLearningParams.for_grid(env.w)
    if isinstance(env, MenuModel):
        return QLearningParams.for_menu(paper_scale)
    raise TypeError(f"no default Q-learning settings for {type(env).__name__}")


def train_policy(env, params: QLearningParams, rng) -> Policy:
    return greedy_policy(q_learn(env, params, rng))


def simulate(env, policy: Policy, rng: np.random.Generator, start: int | None = None) -> Trajectory:
    """One episode from a sampled (or given) initial state, stopping at a terminal state or ``T_max``."""
    if isinstance(env, MenuModel):
        return simulate_menu_episode(env, policy, rng)[0]
    s = env.sample_initial_state(rng) if start is None else int(start)
    states, actions = [s], []
    while len(actions) < env.t_max and not env.is_terminal(s):
        a = policy.sample(s, rng)
        s = env.sample_transition(s, a, rng)
        actions.append(a)
        states.append(s)
    return Trajectory(tuple(states), tuple(actions))


def simulate_summaries(env, policy: Policy, n: int, rng: np.random.Generator | int) -> ObservationSet:
    """Summaries of ``n`` independent rollouts (fast path used by the likelihoods)."""
    rng = np.random.default_rng(rng)
    seed = int(rng.integers(2**62))
    if isinstance(env, GridWorld):
        starts, steps = env.rollout_summaries(policy.probs, n, seed)
        w = env.w
        return ObservationSet.grid(GridSummary((int(s) % w, int(s) // w), int(t)) for s, t in zip(starts, steps))
    if isinstance(env, MenuModel):
        tct, present, _ = env.rollout_summaries(policy.probs, n, seed)
        return ObservationSet.menu(MenuSummary(float(t), bool(p)) for t, p in zip(tct, present))
    raise TypeError(f"no rollout fast path for {type(env).__name__}")


class QTableCache:
    """Directory of Q-tables keyed by ``(environment digest, theta, params, seed)``."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(env, params: QLearningParams, seed: int) -> str:
        payload = json.dumps({"env": env.describe(), "params": asdict(params), "seed": int(seed)}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:24]

    def get_or_train(self, env, params: QLearningParams, seed: int) -> QTable:
        path = self.directory / f"{self.key(env, params, seed)}.npz"
        if path.exists():
            return QTable.load(path)
        q = q_learn(env, params, seed)
        q.save(path)
        return q
