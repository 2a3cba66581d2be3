"""Exact, Monte-Carlo and ABC objectives for summary observations.

Grid summaries are ``(start cell, number of steps)``; the summary function is
deterministic, so ``P(summary | path)`` is an indicator and the exact
likelihood of one observation is the probability that the policy-induced
Markov chain started at that cell first reaches the goal after exactly that
many steps (or has not reached it when the episode is cut at ``T_max``).

Log-likelihood functions return ``-inf`` for impossible observations; use
:func:`finite_objective` before handing values to a GP.
"""

from __future__ import annotations

import logging
import math
from collections import Counter

import numpy as np

from .envs.grid import GridWorld
from .rl import Policy, simulate_summaries
from .types import GridSummary, ObservationSet

log = logging.getLogger(__name__)

LOG_ZERO_SENTINEL = -1e10
DISCREPANCY_FLOOR = 1e-8


class PathBudgetExceeded(RuntimeError):
    """Raised when exhaustive enumeration visits more paths than allowed."""


def _check_grid(env, obs: ObservationSet) -> None:
    if not isinstance(env, GridWorld):
        raise TypeError("the exact and Monte-Carlo likelihoods are defined for grid summaries only")
    if obs.kind != "grid":
        raise ValueError("expected grid summaries")


def _log(p: float) -> float:
    return math.log(p) if p > 0.0 else -math.inf


# -- exact: enumeration --------------------------------------------------------

def exact_terms_enum(env: GridWorld, policy: Policy, obs: ObservationSet,
                     max_paths: int | None = None, lookahead: bool = False) -> dict[GridSummary, float]:
    """Probability of every distinct observation by depth-first path enumeration.

    Only paths that start at the observed cell and never touch the goal before
    the last step are expanded. With ``lookahead`` prefixes that can no longer
    reach the goal in the remaining steps are dropped as well.
    """
    _check_grid(env, obs)
    goal, t_max = env.goal, env.t_max
    dist = env.distance_to_goal().tolist()
    pi = policy.probs
    actions = [[(a, float(pi[s, a])) for a in range(env.n_actions) if pi[s, a] > 0.0]
               for s in range(env.n_states)]
    moves = [[sorted(env.transition_pmf(s, a).items()) if s != goal else [] for a in range(env.n_actions)]
             for s in range(env.n_states)]
    out = {}
    expanded = 0
    for summary in obs.counts():
        start = env.cell(*summary.start)
        T = summary.steps
        p0 = env.initial_prob(start)
        if p0 == 0.0 or T < 1 or T > t_max:
            out[summary] = 0.0
            continue
        censored = T == t_max
        total = 0.0
        stack = [(start, 0, 1.0)]
        while stack:
            s, depth, p = stack.pop()
            if depth == T:
                if s == goal or censored:
                    total += p
                continue
            if s == goal or (lookahead and not censored and dist[s] > T - depth):
                continue
            expanded += 1
            if max_paths is not None and expanded > max_paths:
                raise PathBudgetExceeded(f"enumeration exceeded {max_paths} partial paths")
            for a, pa in actions[s]:
                for s2, ps in moves[s][a]:
                    stack.append((s2, depth + 1, p * pa * ps))
        out[summary] = p0 * total
    return out


def exact_loglik_enum(env: GridWorld, policy: Policy, obs: ObservationSet, max_paths: int | None = None,
                      lookahead: bool = False) -> float:
    """Exact log-likelihood, summing path probabilities over every plausible path."""
    terms = exact_terms_enum(env, policy, obs, max_paths=max_paths, lookahead=lookahead)
    return _sum_logs(terms, obs)


# -- exact: forward recursion ------------------------------------------------------

def policy_chain(env: GridWorld, policy: Policy) -> np.ndarray:
    """``M[s, s'] = sum_a pi(s, a) P(s' | s, a)`` with the goal row zeroed."""
    M = np.einsum("sa,sat->st", policy.probs, env.transition_matrix())
    M[env.goal] = 0.0
    return M


def exact_terms_dp(env: GridWorld, policy: Policy, obs: ObservationSet) -> dict[GridSummary, float]:
    """Probability of every distinct observation via first-arrival recursion."""
    _check_grid(env, obs)
    goal, t_max = env.goal, env.t_max
    M = policy_chain(env, policy)
    by_start: dict[int, list[GridSummary]] = {}
    for summary in obs.counts():
        by_start.setdefault(env.cell(*summary.start), []).append(summary)
    out = {}
    for start, summaries in by_start.items():
        p0 = env.initial_prob(start)
        horizon = min(max(s.steps for s in summaries), t_max)
        arrive = np.zeros(horizon + 1)
        survive = np.zeros(horizon + 1)
        p = np.zeros(env.n_states)
        p[start] = 1.0
        survive[0] = 1.0
        for t in range(1, horizon + 1):
            p = p @ M
            arrive[t] = p[goal]
            p[goal] = 0.0
            survive[t] = p.sum()
        for s in summaries:
            T = s.steps
            if p0 == 0.0 or T < 1 or T > t_max:
                out[s] = 0.0
            elif T == t_max:
                out[s] = p0 * (arrive[T] + survive[T])
            else:
                out[s] = p0 * arrive[T]
    return out


def exact_loglik_dp(env: GridWorld, policy: Policy, obs: ObservationSet) -> float:
    """Exact log-likelihood via the absorption probabilities of the policy chain."""
    return _sum_logs(exact_terms_dp(env, policy, obs), obs)


def _sum_logs(terms: dict, obs: ObservationSet) -> float:
    return float(sum(n * _log(terms[s]) for s, n in obs.counts().items()))


# -- Monte Carlo ---------------------------------------------------------------------

def mc_terms(obs: ObservationSet, sim: ObservationSet) -> dict[GridSummary, tuple[float, float]]:
    """Per distinct observation: floored log-likelihood estimate and its delta-method standard error."""
    n_mc = len(sim)
    hits = Counter(sim.summaries)
    out = {}
    for s in obs.counts():
        p_hat = hits.get(s, 0) / n_mc
        est = p_hat + 1.0 / n_mc
        se = math.sqrt(p_hat * (1.0 - p_hat) / n_mc) / est
        out[s] = (math.log(est), se)
    return out


def mc_loglik(env, policy: Policy, obs: ObservationSet, n_mc: int, rng=None,
              sim: ObservationSet | None = None) -> float:
    """Monte-Carlo log-likelihood with an additive ``1/n_mc`` floor per observation.

    ``sim`` may carry ``n_mc`` pre-simulated summaries; otherwise they are
    drawn from ``policy`` with ``rng``.
    """
    _check_grid(env, obs)
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if sim is None:
        sim = simulate_summaries(env, policy, n_mc, rng)
    elif len(sim) != n_mc:
        raise ValueError(f"sim has {len(sim)} summaries, expected n_mc={n_mc}")
    terms = mc_terms(obs, sim)
    return float(sum(n * terms[s][0] for s, n in obs.counts().items()))


# -- ABC discrepancies -------------------------------------------------------------------

def _grouped_lengths(obs: ObservationSet) -> dict[tuple[int, int], float]:
    sums: dict = {}
    counts: dict = {}
    for s in obs.summaries:
        sums[s.start] = sums.get(s.start, 0.0) + s.steps
        counts[s.start] = counts.get(s.start, 0) + 1
    return {k: sums[k] / counts[k] for k in sums}


def grid_mae(sim: ObservationSet, obs: ObservationSet, t_max: int | None = None) -> float:
    """Mean over observed start cells of ``|mean simulated length - mean observed length|``.

    Start cells missing from ``sim`` are compared against ``t_max``.
    """
    if sim.kind != "grid" or obs.kind != "grid":
        raise ValueError("grid_mae needs grid summaries")
    sim_means = _grouped_lengths(sim)
    obs_means = _grouped_lengths(obs)
    errors = []
    missing = 0
    for start, m_obs in obs_means.items():
        if start in sim_means:
            errors.append(abs(sim_means[start] - m_obs))
        else:
            if t_max is None:
                raise ValueError(f"start {start} absent from simulated set and no t_max given")
            missing += 1
            errors.append(abs(m_obs - t_max))
    if missing:
        log.warning("%d observed start cells absent from simulated set; compared against T_max", missing)
    return float(np.mean(errors))


def grid_discrepancy(sim: ObservationSet, obs: ObservationSet, t_max: int | None = None) -> float:
    """``log`` of the per-start path-length MAE, floored at ``log(1e-8)``."""
    return math.log(max(grid_mae(sim, obs, t_max), DISCREPANCY_FLOOR))


def _condition_stats(obs: ObservationSet) -> dict[bool, tuple[float, float]]:
    tct, present = obs.menu_arrays()
    stats = {}
    for cond in (True, False):
        x = tct[present == cond]
        if x.size:
            stats[cond] = (float(x.mean()), float(x.std()))
    return stats


def menu_discrepancy(sim: ObservationSet, obs: ObservationSet) -> float:
    """``log`` of squared TCT-mean differences plus absolute SD differences over both conditions.

    A condition missing on one side is compared against mean 0 and SD 0.
    """
    if sim.kind != "menu" or obs.kind != "menu":
        raise ValueError("menu_discrepancy needs menu summaries")
    a, b = _condition_stats(sim), _condition_stats(obs)
    total = 0.0
    for cond in (True, False):
        if cond not in a and cond not in b:
            continue
        if cond not in a or cond not in b:
            log.warning("menu condition target_present=%s missing from one set", cond)
        m_a, s_a = a.get(cond, (0.0, 0.0))
        m_b, s_b = b.get(cond, (0.0, 0.0))
        total += (m_a - m_b) ** 2 + abs(s_a - s_b)
    return math.log(max(total, DISCREPANCY_FLOOR))


def finite_objective(loglik: float) -> float:
    """Replace ``-inf`` by :data:`LOG_ZERO_SENTINEL` so a GP can ingest it."""
    return LOG_ZERO_SENTINEL if not math.isfinite(loglik) else float(loglik)
