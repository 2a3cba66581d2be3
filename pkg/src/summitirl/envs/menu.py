"""Visual search in an 8-item drop-down menu, encoded as an MDP over observations.

A full menu layout (target position, semantic relevance and length match of
every item) is drawn at the start of each episode.  The agent only sees what
it has observed so far:

* fixating item ``i`` always reveals its semantic relevance, and its length
  with probability ``p_len_current``;
* each neighbour of ``i`` reveals its relevance with probability ``p_sem``
  and its length with probability ``p_len_neighbor``;
* with probability ``p_rec`` the first fixation reveals the whole layout.

Fixating the target selects it (``+d_sel``) and ends the episode with
``reward_correct``.  Quitting costs no time and ends the episode with
``reward_quit_absent`` or ``reward_quit_present``.  Every action is penalised
by its duration in milliseconds.

Learned policies act on a compact observation code: per item one of
*unknown*, *length matches but relevance unseen*, *excluded*; plus the gaze
position; or, once the target has been seen, just its position and the gaze.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numba
import numpy as np

from ..types import MenuSummary, Trajectory
from .base import Environment
from .grid import _decay

N_ITEMS = 8
QUIT = N_ITEMS
N_ACTIONS = N_ITEMS + 1

# hidden semantic relevance levels
LOW, MEDIUM, HIGH, TARGET = 1, 2, 3, 4
# compact per-item codes
UNKNOWN, LENGTH_MATCH, EXCLUDED = 0, 1, 2

N_GAZE = N_ITEMS + 1  # 0: no fixation yet (gaze rests on item 0), k: item k-1
_N_SEARCH = 3**N_ITEMS * N_GAZE
N_STATES = _N_SEARCH + N_ITEMS * N_GAZE
START_STATE = 0

THETA_NAMES = ("f_dur", "d_sel", "p_rec")


@dataclass(frozen=True, eq=False)
class MenuModel(Environment):
    """Menu-search model; ``theta = (f_dur, d_sel, p_rec)``.

    ``f_dur`` is in units of 100 ms and ``d_sel`` in seconds.
    """

    f_dur: float = 3.0
    d_sel: float = 0.3
    p_rec: float = 0.7
    p_sem: float = 0.9
    p_len_current: float = 0.95
    p_len_neighbor: float = 0.89
    p_target_present: float = 0.9
    p_length_match: float = 0.25
    relevance_probs: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    saccade_intercept_ms: float = 37.0
    saccade_slope_ms: float = 2.7
    max_actions: int = 100
    reward_correct: float = 10000.0
    reward_quit_absent: float = 10000.0
    reward_quit_present: float = -10000.0
    menu_seed: int = 0
    n_train_menus: int = 20000
    n_test_menus: int = 10000
    _menus: dict = field(default_factory=dict, repr=False, compare=False)

    has_transition_pmf = False
    n_items = N_ITEMS

    def __post_init__(self) -> None:
        for name in ("p_rec", "p_sem", "p_len_current", "p_len_neighbor", "p_target_present", "p_length_match"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.f_dur < 0 or self.d_sel < 0:
            raise ValueError("durations must be non-negative")
        probs = np.asarray(self.relevance_probs, dtype=float)
        if probs.shape != (3,) or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ValueError("relevance_probs must be a distribution over (low, medium, high)")
        if self.max_actions < 1:
            raise ValueError("max_actions must be positive")

    # -- Environment contract -------------------------------------------------
    @property
    def n_states(self) -> int:
        return N_STATES

    @property
    def n_actions(self) -> int:
        return N_ACTIONS

    @property
    def t_max(self) -> int:
        return self.max_actions

    @property
    def theta(self) -> tuple[float, float, float]:
        return (self.f_dur, self.d_sel, self.p_rec)

    def sample_initial_state(self, rng: np.random.Generator) -> int:
        return START_STATE

    def is_terminal(self, state: int) -> bool:
        # termination depends on the hidden layout, never on the observation code
        return False

    def with_theta(self, theta) -> "MenuModel":
        f_dur, d_sel, p_rec = (float(v) for v in np.atleast_1d(theta))
        new = dataclasses.replace(self, f_dur=f_dur, d_sel=d_sel, p_rec=p_rec)
        # layouts do not depend on theta; share them
        object.__setattr__(new, "_menus", self._menus)
        return new

    def describe(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if not f.name.startswith("_")}
        d["relevance_probs"] = list(self.relevance_probs)
        return {"env": "menu", **d}

    # -- durations ------------------------------------------------------------
    def saccade_ms(self, distance: float) -> float:
        return 0.0 if distance == 0 else self.saccade_intercept_ms + self.saccade_slope_ms * distance

    def _kernel_params(self) -> np.ndarray:
        return np.array([
            self.f_dur * 100.0, self.d_sel * 1000.0, self.p_rec, self.p_sem,
            self.p_len_current, self.p_len_neighbor, self.saccade_intercept_ms,
            self.saccade_slope_ms, self.reward_correct, self.reward_quit_absent,
            self.reward_quit_present,
        ])

    # -- layouts --------------------------------------------------------------
    def menus(self, which: str = "train") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Fixed menu layouts ``(target, relevance, length_match)``.

        ``which`` is ``"train"`` (used for learning) or ``"test"`` (used for
        prediction); the two sets are disjoint draws from ``menu_seed``.
        """
        if which not in ("train", "test"):
            raise ValueError(f"unknown menu set {which!r}")
        if which not in self._menus:
            ss = np.random.SeedSequence(self.menu_seed).spawn(2)[0 if which == "train" else 1]
            n = self.n_train_menus if which == "train" else self.n_test_menus
            self._menus[which] = generate_menus(self, n, np.random.default_rng(ss))
        return self._menus[which]

    # -- fast paths -----------------------------------------------------------
    def q_table_shape(self) -> tuple[int, int]:
        return N_STATES, N_ACTIONS

    def train_q_batch(self, Q: np.ndarray, visits: np.ndarray, params, episodes: int, seed: int) -> None:
        target, rel, lmatch = self.menus("train")
        _menu_q_learning(
            Q, visits, target, rel, lmatch, self._kernel_params(), self.max_actions,
            int(episodes), float(params.learning_rate), float(params.discount),
            float(params.exploration_rate), float(params.softmax_temperature),
            params.exploration == "softmax", *params.decay_args(), int(seed),
        )

    def rollout_summaries(self, policy_probs: np.ndarray, n: int, seed: int, menus: str = "test"):
        """Simulate ``n`` episodes; returns ``(tct_ms, target_present, n_actions)`` arrays."""
        target, rel, lmatch = self.menus(menus)
        pcum = np.cumsum(policy_probs, axis=1)
        pcum[:, -1] = 1.0
        return _menu_rollouts(target, rel, lmatch, self._kernel_params(), self.max_actions, pcum, int(n), int(seed))


def generate_menus(model: MenuModel, n: int, rng: np.random.Generator):
    present = rng.random(n) < model.p_target_present
    target = np.where(present, rng.integers(N_ITEMS, size=n), -1).astype(np.int64)
    rel = rng.choice(np.array([LOW, MEDIUM, HIGH]), size=(n, N_ITEMS), p=np.asarray(model.relevance_probs)).astype(np.int64)
    lmatch = rng.random((n, N_ITEMS)) < model.p_length_match
    rows = np.flatnonzero(present)
    rel[rows, target[rows]] = TARGET
    lmatch[rows, target[rows]] = True
    return target, rel, lmatch.astype(np.int64)


def simulate_menu_episode(model: MenuModel, policy, rng: np.random.Generator, layout=None):
    """Run one episode on a freshly drawn layout (or ``layout``).

    Returns the trajectory over compact observation codes and the
    ``MenuSummary``.  ``policy`` is a :class:`summitirl.rl.Policy` or an
    ``(N_STATES, N_ACTIONS)`` probability array.
    """
    probs = np.asarray(getattr(policy, "probs", policy))
    if layout is None:
        target, rel, lmatch = generate_menus(model, 1, rng)
    else:
        target, rel, lmatch = (np.atleast_1d(np.asarray(v, dtype=np.int64)) for v in layout)
        target, rel, lmatch = target.reshape(1), rel.reshape(1, N_ITEMS), lmatch.reshape(1, N_ITEMS)
    pcum = np.cumsum(probs, axis=1)
    pcum[:, -1] = 1.0
    seed = int(rng.integers(2**62))
    states, actions, durations, rewards = _menu_episode_trace(
        target[0], rel[0], lmatch[0], model._kernel_params(), model.max_actions, pcum, seed
    )
    traj = Trajectory(tuple(int(s) for s in states), tuple(int(a) for a in actions))
    summary = MenuSummary(float(durations.sum()), bool(target[0] >= 0))
    return traj, summary, durations, rewards


def encode_observation(obs_rel: np.ndarray, obs_len: np.ndarray, gaze: int) -> int:
    """Compact code of a full observation (see module docstring)."""
    return int(_encode(np.asarray(obs_rel, dtype=np.int64), np.asarray(obs_len, dtype=np.int64), gaze))


@numba.njit(cache=True)
def _encode(obs_rel, obs_len, gaze):
    code = 0
    mult = 1
    for i in range(N_ITEMS):
        if obs_rel[i] == TARGET:
            return _N_SEARCH + i * N_GAZE + gaze
        if obs_rel[i] > 0 or obs_len[i] == 2:
            c = EXCLUDED
        elif obs_len[i] == 1:
            c = LENGTH_MATCH
        else:
            c = UNKNOWN
        code += c * mult
        mult *= 3
    return code * N_GAZE + gaze


@numba.njit(cache=True)
def _reveal(i, obs_rel, obs_len, rel, lmatch, p_rel, p_len):
    if np.random.random() < p_rel:
        obs_rel[i] = rel[i]
    if np.random.random() < p_len:
        obs_len[i] = 1 if lmatch[i] else 2


@numba.njit(cache=True)
def _step(a, n_done, gaze, obs_rel, obs_len, target, rel, lmatch, kp):
    """Apply action ``a``; returns (duration_ms, reward, done, new_gaze)."""
    f_ms, sel_ms, p_rec, p_sem, p_lc, p_ln, sac0, sac1, r_ok, r_qa, r_qp = (
        kp[0], kp[1], kp[2], kp[3], kp[4], kp[5], kp[6], kp[7], kp[8], kp[9], kp[10])
    if a == QUIT:
        if target < 0:
            return 0.0, r_qa, True, gaze
        return 0.0, r_qp, True, gaze
    pos = 0 if gaze == 0 else gaze - 1
    dist = abs(a - pos)
    dur = f_ms
    if dist > 0:
        dur += sac0 + sac1 * dist
    obs_rel[a] = rel[a]
    if np.random.random() < p_lc:
        obs_len[a] = 1 if lmatch[a] else 2
    if a > 0:
        _reveal(a - 1, obs_rel, obs_len, rel, lmatch, p_sem, p_ln)
    if a < N_ITEMS - 1:
        _reveal(a + 1, obs_rel, obs_len, rel, lmatch, p_sem, p_ln)
    if n_done == 0 and np.random.random() < p_rec:
        for j in range(N_ITEMS):
            obs_rel[j] = rel[j]
            obs_len[j] = 1 if lmatch[j] else 2
    if a == target:
        dur += sel_ms
        return dur, r_ok - dur, True, a + 1
    return dur, -dur, False, a + 1


@numba.njit(cache=True)
def _pick(row, pcum_row, greedy_eps, tau, use_softmax, learning):
    n = row.shape[0]
    if not learning:
        u = np.random.random()
        a = 0
        while a < n - 1 and u >= pcum_row[a]:
            a += 1
        return a
    if use_softmax:
        m = row.max()
        w = np.exp((row - m) / tau)
        u = np.random.random() * w.sum()
        acc = 0.0
        for i in range(n):
            acc += w[i]
            if u < acc:
                return i
        return n - 1
    if np.random.random() < greedy_eps:
        return np.random.randint(n)
    best = row.max()
    n_best = 0
    for i in range(n):
        if row[i] == best:
            n_best += 1
    k = np.random.randint(n_best)
    for i in range(n):
        if row[i] == best:
            if k == 0:
                return i
            k -= 1
    return 0


@numba.njit(cache=True)
def _menu_q_learning(Q, visits, targets, rels, lmatches, kp, max_actions, episodes,
                     alpha, gamma, eps, tau, use_softmax, decay_c, decay_pow, seed):
    np.random.seed(seed)
    n_menus = targets.shape[0]
    obs_rel = np.zeros(N_ITEMS, dtype=np.int64)
    obs_len = np.zeros(N_ITEMS, dtype=np.int64)
    dummy = np.zeros(N_ACTIONS)
    for _ in range(episodes):
        m = np.random.randint(n_menus)
        obs_rel[:] = 0
        obs_len[:] = 0
        gaze = 0
        s = START_STATE
        for t in range(max_actions):
            a = _pick(Q[s], dummy, eps, tau, use_softmax, True)
            dur, r, done, gaze = _step(a, t, gaze, obs_rel, obs_len, targets[m], rels[m], lmatches[m], kp)
            if done:
                target = r
                s2 = s
            else:
                s2 = _encode(obs_rel, obs_len, gaze)
                target = r + gamma * Q[s2].max()
            Q[s, a] += alpha * _decay(visits[s, a], decay_c, decay_pow) * (target - Q[s, a])
            visits[s, a] += 1
            if done:
                break
            s = s2


@numba.njit(cache=True)
def _menu_rollouts(targets, rels, lmatches, kp, max_actions, pcum, n, seed):
    np.random.seed(seed)
    n_menus = targets.shape[0]
    tct = np.zeros(n)
    present = np.zeros(n, dtype=np.bool_)
    n_act = np.zeros(n, dtype=np.int64)
    obs_rel = np.zeros(N_ITEMS, dtype=np.int64)
    obs_len = np.zeros(N_ITEMS, dtype=np.int64)
    dummy = np.zeros(N_ACTIONS)
    for i in range(n):
        m = np.random.randint(n_menus)
        present[i] = targets[m] >= 0
        obs_rel[:] = 0
        obs_len[:] = 0
        gaze = 0
        s = START_STATE
        total = 0.0
        t = 0
        while t < max_actions:
            a = _pick(dummy, pcum[s], 0.0, 1.0, False, False)
            dur, r, done, gaze = _step(a, t, gaze, obs_rel, obs_len, targets[m], rels[m], lmatches[m], kp)
            total += dur
            t += 1
            if done:
                break
            s = _encode(obs_rel, obs_len, gaze)
        tct[i] = total
        n_act[i] = t
    return tct, present, n_act


@numba.njit(cache=True)
def _menu_episode_trace(target, rel, lmatch, kp, max_actions, pcum, seed):
    np.random.seed(seed)
    states = np.zeros(max_actions + 1, dtype=np.int64)
    actions = np.zeros(max_actions, dtype=np.int64)
    durations = np.zeros(max_actions)
    rewards = np.zeros(max_actions)
    obs_rel = np.zeros(N_ITEMS, dtype=np.int64)
    obs_len = np.zeros(N_ITEMS, dtype=np.int64)
    dummy = np.zeros(N_ACTIONS)
    gaze = 0
    s = START_STATE
    states[0] = s
    t = 0
    while t < max_actions:
        a = _pick(dummy, pcum[s], 0.0, 1.0, False, False)
        dur, r, done, gaze = _step(a, t, gaze, obs_rel, obs_len, target, rel, lmatch, kp)
        actions[t] = a
        durations[t] = dur
        rewards[t] = r
        t += 1
        s = _encode(obs_rel, obs_len, gaze)
        states[t] = s
        if done:
            break
    return states[: t + 1], actions[:t], durations[:t], rewards[:t]
