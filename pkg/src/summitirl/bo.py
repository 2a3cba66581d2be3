"""Batch Bayesian optimisation of likelihood objectives and the resulting surfaces.

All objectives are minimised: ``-log L`` for the exact and Monte-Carlo
branches, the discrepancy for ABC.  Batches are chosen with a lower
confidence bound and greedy local penalisation (Gonzalez et al., 2016).
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import optimize, stats
from scipy.special import log_ndtr, ndtr

from . import likelihood as lk
from .gp import GpModel, gp_fit
from .rl import QLearningParams, default_q_params, simulate_summaries, train_policy
from .types import ObservationSet, ThetaBounds

log = logging.getLogger(__name__)

OBJECTIVES = ("exact", "mc", "abc")
LIPSCHITZ_FALLBACK = 10.0
N_MEAN_STARTS = 64


@dataclass(frozen=True)
class BoConfig:
    """Settings of one run of the surrogate-building loop.

    ``n_opt`` evaluations in batches of ``batch_size``; the first batch is a
    scrambled Halton design.  ``exact_method`` picks the forward recursion
    (``"dp"``) or path enumeration (``"enum"``) for the exact objective.
    """

    n_opt: int
    batch_size: int
    bounds: ThetaBounds
    objective: str = "mc"
    n_mc: int = 1000
    kappa: float = 2.0
    seed: int = 0
    exact_method: str = "dp"
    max_paths: int | None = None
    gp_restarts: int = 8
    gp_mean: str = "gls"
    n_candidates: int = 2000
    abc_noise: bool = True

    def __post_init__(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.batch_size < 1 or self.n_opt < self.batch_size or self.n_opt % self.batch_size:
            raise ValueError("n_opt must be a positive multiple of batch_size")
        if self.batch_size < 2 and self.n_opt == self.batch_size:
            raise ValueError("the initial design needs at least two points")
        if self.objective != "exact" and self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.exact_method not in ("dp", "enum"):
            raise ValueError("exact_method must be 'dp' or 'enum'")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = self.bounds.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BoConfig":
        d = dict(d)
        d["bounds"] = ThetaBounds.from_dict(d["bounds"])
        return cls(**d)


@dataclass(frozen=True)
class EvaluationRecord:
    theta: tuple[float, ...]
    objective: float
    wall_clock_s: float
    kind: str
    seed: int
    batch: int
    attempt: int = 0


# -- surfaces -----------------------------------------------------------------------

@dataclass
class LikelihoodSurface:
    """GP surrogate of the objective plus the rule that turns it into a likelihood.

    ``kind == "log"``: the GP models ``-log L`` (or ``-log`` posterior if
    ``prior_in_objective``), so ``log L(theta) = -G_mu(theta)``.
    ``kind == "abc"``: the GP models the discrepancy and
    ``L(theta) = P(d_theta <= eps) = Phi((eps - G_mu) / s)``. With
    ``abc_noise`` the scale ``s`` is the predictive sd of a new simulated
    discrepancy (latent variance plus noise variance), otherwise the latent
    sd ``G_s`` alone.
    """

    gp: GpModel
    kind: str
    epsilon: float | None = None
    prior_in_objective: bool = False
    meta: dict = field(default_factory=dict)
    abc_noise: bool = True

    def __post_init__(self) -> None:
        if self.kind not in ("log", "abc"):
            raise ValueError("surface kind must be 'log' or 'abc'")
        if self.kind == "abc" and self.epsilon is None:
            raise ValueError("an abc surface needs epsilon")

    @property
    def bounds(self) -> ThetaBounds:
        return self.gp.bounds

    def log_likelihood(self, theta) -> np.ndarray:
        """Log of the surrogate likelihood at the rows of ``theta``."""
        if self.kind == "log":
            return -self.gp.predict(theta)[0]
        mu, s = self.gp.predict(theta, include_noise=self.abc_noise)
        return _log_abc(self.epsilon, mu, s)

    def likelihood(self, theta) -> np.ndarray:
        if self.kind == "abc":
            mu, s = self.gp.predict(theta, include_noise=self.abc_noise)
            return _abc(self.epsilon, mu, s)
        return np.exp(self.log_likelihood(theta))

    def uncertainty(self, theta) -> np.ndarray:
        return self.gp.predict(theta)[1]

    def to_dict(self) -> dict:
        return {"schema_version": 1, "kind": self.kind, "epsilon": self.epsilon,
                "prior_in_objective": self.prior_in_objective, "abc_noise": self.abc_noise, "gp": self.gp.to_dict(),
                "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "LikelihoodSurface":
        return cls(GpModel.from_dict(d["gp"]), d["kind"], d.get("epsilon"), d.get("prior_in_objective", False),
                   d.get("meta", {}), d.get("abc_noise", True))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "LikelihoodSurface":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _abc(eps: float, mu, s):
    s = np.asarray(s, dtype=float)
    z = np.where(s > 0, (eps - mu) / np.where(s > 0, s, 1.0), np.where(mu <= eps, np.inf, -np.inf))
    return ndtr(z)


def _log_abc(eps: float, mu, s):
    s = np.asarray(s, dtype=float)
    z = np.where(s > 0, (eps - mu) / np.where(s > 0, s, 1.0), np.where(mu <= eps, np.inf, -np.inf))
    return log_ndtr(z)


def abc_surface(gp: GpModel, meta: dict | None = None, abc_noise: bool = True) -> LikelihoodSurface:
    """ABC surface with ``eps`` set to the minimum of the predicted discrepancy."""
    _, eps = minimize_predicted_mean(gp, gp.bounds)
    return LikelihoodSurface(gp, "abc", float(eps), meta=dict(meta or {}), abc_noise=abc_noise)


# -- acquisition ------------------------------------------------------------------------

def _halton(n: int, d: int, seed: int) -> np.ndarray:
    return stats.qmc.Halton(d, scramble=True, seed=seed).random(n)


def initial_design(bounds: ThetaBounds, n: int, seed: int) -> np.ndarray:
    """Scrambled Halton points mapped into ``bounds``."""
    return bounds.from_unit(_halton(n, bounds.dim, seed))


def minimize_predicted_mean(gp: GpModel, bounds: ThetaBounds | None = None, seed: int = 0) -> tuple[np.ndarray, float]:
    """Minimise ``G_mu`` over the box from all training inputs and 64 quasi-random starts."""
    bounds = bounds or gp.bounds
    starts = np.vstack([np.clip(bounds.to_unit(gp.X), 0.0, 1.0), _halton(N_MEAN_STARTS, bounds.dim, seed)])
    to_gp = gp.bounds.to_unit(bounds.from_unit(np.zeros(bounds.dim)))
    scale = bounds.width / gp.bounds.width

    def f(u):
        x = bounds.from_unit(u)
        mu, _ = gp.predict(x[None, :])
        g = gp.grad_mean_unit((to_gp + u * scale)[None, :])[0] * scale
        return float(mu[0]), g

    best_u, best_v = None, math.inf
    for u0 in starts:
        res = optimize.minimize(f, u0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * bounds.dim)
        if res.fun < best_v:
            best_u, best_v = res.x, float(res.fun)
    return bounds.from_unit(best_u), best_v


def estimate_lipschitz(gp: GpModel, seed: int = 0) -> float:
    """Largest norm of ``grad G_mu`` over the unit cube (sampled, then refined)."""
    d = gp.bounds.dim
    U = np.vstack([gp.U, _halton(500, d, seed + 1)])
    norms = np.linalg.norm(gp.grad_mean_unit(U), axis=1)
    best = float(norms.max())
    for u0 in U[np.argsort(norms)[-3:]]:
        res = optimize.minimize(lambda u: -np.linalg.norm(gp.grad_mean_unit(u[None, :])[0]), u0,
                                method="L-BFGS-B", bounds=[(0.0, 1.0)] * d)
        best = max(best, float(-res.fun))
    return best if best >= 1e-7 else LIPSCHITZ_FALLBACK


def _log_softplus(a):
    a = np.asarray(a, dtype=float)
    with np.errstate(over="ignore"):
        return np.where(a < -30.0, a, np.log(np.log1p(np.exp(np.minimum(a, 700.0)))))


def select_batch(gp: GpModel, config: BoConfig, seed: int = 0) -> np.ndarray:
    """Pick ``config.batch_size`` points by LCB with greedy local penalisation.

    The acquisition ``-(G_mu - kappa G_s - M) / scale`` (``M`` the best
    observed value, ``scale`` the target standard deviation) is passed
    through a softplus and multiplied by
    ``Phi((L ||u - u_j|| - (G_mu(u_j) - M)) / s_j)`` for every point already
    in the batch.  Distances are measured in unit-cube coordinates.
    """
    bounds = config.bounds
    d = bounds.dim
    M = float(gp.y.min())
    scale = float(gp.y.std()) or 1.0
    L = estimate_lipschitz(gp, seed)
    cand = np.vstack([_halton(config.n_candidates, d, seed + 2), np.clip(bounds.to_unit(gp.X), 0, 1)])
    chosen: list[np.ndarray] = []
    pen: list[tuple[np.ndarray, float, float]] = []

    def log_acq(U):
        mu, s = gp.predict(bounds.from_unit(U))
        val = _log_softplus(-(mu - config.kappa * s - M) / scale)
        for uj, rj, sj in pen:
            dist = np.linalg.norm(U - uj, axis=1)
            val = val + log_ndtr((L * dist - rj) / sj)
        return val

    for _ in range(config.batch_size):
        vals = log_acq(cand)
        order = np.argsort(-vals)
        best_u, best_v = None, -math.inf
        for u0 in cand[order[:5]]:
            res = optimize.minimize(lambda u: -float(log_acq(u[None, :])[0]), u0, method="L-BFGS-B",
                                    bounds=[(0.0, 1.0)] * d)
            u, v = np.clip(res.x, 0, 1), -float(res.fun)
            if not _is_new(u, chosen):
                continue
            if v > best_v:
                best_u, best_v = u, v
        if best_u is None:
            best_u = next(u for u in cand[order] if _is_new(u, chosen))
        chosen.append(best_u)
        mu_j, s_j = gp.predict(bounds.from_unit(best_u[None, :]), include_noise=True)
        pen.append((best_u, max(float(mu_j[0]) - M, 0.0), max(float(s_j[0]), 1e-12)))
    log.debug("select_batch L=%.4g M=%.4g", L, M)
    return bounds.from_unit(np.array(chosen))


def _is_new(u: np.ndarray, chosen: list[np.ndarray], tol: float = 1e-6) -> bool:
    return all(np.max(np.abs(u - c)) > tol for c in chosen)


# -- objective evaluation ------------------------------------------------------------------

def evaluate_objective(env, obs: ObservationSet, config: BoConfig, q_params: QLearningParams,
                       seed: np.random.SeedSequence, log_prior: Callable | None = None) -> float:
    """One branch of the loop body: train a policy, then score ``obs``; smaller is better."""
    rl_seed, sim_seed = seed.generate_state(2, dtype=np.uint64)
    policy = train_policy(env, q_params, int(rl_seed))
    if config.objective == "exact":
        if config.exact_method == "dp":
            ll = lk.exact_loglik_dp(env, policy, obs)
        else:
            ll = lk.exact_loglik_enum(env, policy, obs, max_paths=config.max_paths)
        value = -lk.finite_objective(ll)
    else:
        sim = simulate_summaries(env, policy, config.n_mc, int(sim_seed))
        if config.objective == "mc":
            value = -lk.mc_loglik(env, policy, obs, config.n_mc, sim=sim)
        elif obs.kind == "grid":
            return lk.grid_discrepancy(sim, obs, env.t_max)
        else:
            return lk.menu_discrepancy(sim, obs)
    if log_prior is not None:
        value -= float(log_prior(np.asarray(env.theta)))
    return float(value)


def _point_seed(config: BoConfig, batch: int, index: int, attempt: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(config.seed, spawn_key=(batch, index, attempt))


def _evaluate_point(env_factory, theta, obs, config, q_params, batch, index, log_prior):
    for attempt in (0, 1):
        ss = _point_seed(config, batch, index, attempt)
        t0 = time.perf_counter()
        try:
            value = evaluate_objective(env_factory(theta), obs, config, q_params, ss, log_prior)
            if not math.isfinite(value):
                raise FloatingPointError(f"objective {value}")
        except Exception as exc:  # noqa: BLE001 - any failure triggers one retry, then a skip
            log.warning("evaluation at %s failed (attempt %d): %s", theta, attempt, exc)
            continue
        seed_int = int(ss.generate_state(1, dtype=np.uint64)[0])
        return EvaluationRecord(tuple(map(float, theta)), value, time.perf_counter() - t0,
                                config.objective, seed_int, batch, attempt)
    log.error("skipping evaluation at %s after retry", theta)
    return None


def evaluate_batch(env_factory, thetas, obs, config, q_params, batch, log_prior=None, jobs: int = 1):
    args = [(env_factory, th, obs, config, q_params, batch, i, log_prior) for i, th in enumerate(thetas)]
    if jobs > 1:
        from joblib import Parallel, delayed
        out = Parallel(n_jobs=jobs)(delayed(_evaluate_point)(*a) for a in args)
    else:
        out = [_evaluate_point(*a) for a in args]
    return out


def _fit(records: list[EvaluationRecord], config: BoConfig) -> GpModel:
    X = np.array([r.theta for r in records])
    y = np.array([r.objective for r in records])
    return gp_fit(X, y, config.bounds, n_restarts=config.gp_restarts, seed=config.seed, mean=config.gp_mean)


def run_algorithm1(env_factory: Callable, obs: ObservationSet, config: BoConfig, *,
                   q_params: QLearningParams | None = None, log_prior: Callable | None = None,
                   jobs: int = 1, on_batch: Callable | None = None):
    """Build a likelihood surface by batch Bayesian optimisation.

    Parameters
    ----------
    env_factory : maps a parameter vector to an environment.
    obs : observed summaries.
    config : loop settings.
    q_params : Q-learning settings; defaults to those of the environment type.
    log_prior : if given and the objective is a log-likelihood, the loop
        models the negative log-posterior instead.  Ignored for ABC, where
        the prior multiplies the likelihood afterwards.
    jobs : parallel workers for the evaluations of one batch.
    on_batch : called as ``on_batch(batch_index, records)`` after every batch.

    Returns
    -------
    surface, records
    """
    if config.objective == "abc":
        log_prior = None
    env0 = env_factory(config.bounds.center)
    if config.objective == "exact" and not env0.has_transition_pmf:
        raise ValueError("the exact objective needs an environment with a transition pmf")
    if q_params is None:
        q_params = default_q_params(env0)
    records: list[EvaluationRecord] = []
    gp = None
    n_batches = config.n_opt // config.batch_size
    for b in range(n_batches):
        if b == 0:
            thetas = initial_design(config.bounds, config.batch_size, config.seed)
        else:
            thetas = select_batch(gp, config, seed=config.seed + b)
        new = evaluate_batch(env_factory, thetas, obs, config, q_params, b, log_prior, jobs)
        records.extend(r for r in new if r is not None)
        if len(records) >= 2:
            gp = _fit(records, config)
        elif b == n_batches - 1 or gp is None:
            raise RuntimeError("fewer than two successful evaluations; cannot fit the surrogate")
        if on_batch is not None:
            on_batch(b, records)
        log.info("batch %d/%d done, best objective %.4g", b + 1, n_batches, min(r.objective for r in records))
    meta = {"config": config.to_dict(), "q_params": asdict(q_params), "n_skipped": config.n_opt - len(records)}
    if config.objective == "abc":
        surface = abc_surface(gp, meta, config.abc_noise)
    else:
        surface = LikelihoodSurface(gp, "log", prior_in_objective=log_prior is not None, meta=meta)
    return surface, records


def write_records(records: list[EvaluationRecord], path: str | Path, header: dict | None = None) -> None:
    """Evaluation log as CSV: ``theta_1..theta_k, objective, wall_clock_s, kind, seed, batch, attempt``."""
    k = len(records[0].theta) if records else 0
    with open(path, "w", newline="") as fh:
        for key, value in (header or {}).items():
            fh.write(f"# {key}: {json.dumps(value, sort_keys=True)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"theta_{i + 1}" for i in range(k)] + ["objective", "wall_clock_s", "kind", "seed", "batch",
                                                           "attempt"])
        for r in records:
            w.writerow([repr(t) for t in r.theta] + [repr(r.objective), f"{r.wall_clock_s:.6f}", r.kind, r.seed,
                                                     r.batch, r.attempt])

