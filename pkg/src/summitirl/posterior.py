"""Posterior sampling over likelihood surfaces, density estimates and evaluation metrics."""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .bo import LikelihoodSurface
from .likelihood import grid_mae, menu_discrepancy
from .rl import QLearningParams, default_q_params, simulate_summaries, train_policy
from .types import ObservationSet, ThetaBounds

log = logging.getLogger(__name__)


# -- priors ----------------------------------------------------------------------------

class Prior:
    """Product of independent one-dimensional priors."""

    def __init__(self, components: Sequence, names: Sequence[str] | None = None):
        self.components = list(components)
        self.names = list(names) if names else None

    @property
    def dim(self) -> int:
        return len(self.components)

    def logpdf(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        total = 0.0
        for c, t in zip(self.components, theta):
            lp = float(c.logpdf(t))
            if lp == -math.inf:
                return -math.inf
            total += lp
        return total

    def __call__(self, theta) -> float:
        return self.logpdf(theta)

    def mean(self) -> np.ndarray:
        return np.array([float(c.mean()) for c in self.components])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return np.column_stack([c.rvs(size=n, random_state=rng) for c in self.components])

    def describe(self) -> list[dict]:
        out = []
        for c in self.components:
            d = {"dist": c.dist.name, "args": [float(a) for a in c.args]}
            d.update({k: float(v) for k, v in c.kwds.items()})
            out.append(d)
        return out


def uniform_prior(bounds: ThetaBounds) -> Prior:
    return Prior([stats.uniform(lo, hi - lo) for lo, hi in zip(bounds.lower, bounds.upper)], bounds.names)


def truncnorm_1d(mu: float, sigma: float, lo: float, hi: float):
    return stats.truncnorm((lo - mu) / sigma, (hi - mu) / sigma, loc=mu, scale=sigma)


def beta_1d(a: float, b: float, lo: float = 0.0, hi: float = 1.0):
    return stats.beta(a, b, loc=lo, scale=hi - lo)


def prior_from_config(spec: list[dict], bounds: ThetaBounds) -> Prior:
    """Build a prior from entries ``{"type": "uniform" | "truncnorm" | "beta", ...}``.

    Truncated normals are truncated to the bounds of their dimension and
    Beta densities are scaled onto it.
    """
    comps = []
    for entry, lo, hi in zip(spec, bounds.lower, bounds.upper):
        kind = entry["type"]
        if kind == "uniform":
            comps.append(stats.uniform(lo, hi - lo))
        elif kind == "truncnorm":
            comps.append(truncnorm_1d(entry["mu"], entry["sigma"], lo, hi))
        elif kind == "beta":
            comps.append(beta_1d(entry["a"], entry["b"], lo, hi))
        else:
            raise ValueError(f"unknown prior type {kind!r}")
    if len(comps) != bounds.dim:
        raise ValueError("need one prior entry per dimension")
    return Prior(comps, bounds.names)


# -- MCMC ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class McmcConfig:
    """Random-walk Metropolis-Hastings settings.

    ``proposal_sd`` is a scalar or one value per dimension.  ``start``
    defaults to the centre of the bounds.
    """

    n_samples: int = 10_000
    burn_in: int = 1_000
    thinning: int = 5
    proposal_sd: float | tuple[float, ...] = 0.1
    start: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.n_samples <= self.burn_in or self.burn_in < 0:
            raise ValueError("need 0 <= burn_in < n_samples")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if np.any(np.asarray(self.proposal_sd) <= 0):
            raise ValueError("proposal_sd must be positive")

    @property
    def n_kept(self) -> int:
        return -(-(self.n_samples - self.burn_in) // self.thinning)


@dataclass(frozen=True, eq=False)
class PosteriorSamples:
    samples: np.ndarray
    acceptance_rate: float
    seed: int
    config: McmcConfig
    bounds: ThetaBounds
    meta: dict = field(default_factory=dict)

    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)

    def to_csv(self, path: str | Path, header: dict | None = None) -> None:
        names = list(self.bounds.names or [f"theta_{i + 1}" for i in range(self.bounds.dim)])
        head = {"seed": self.seed, "acceptance_rate": self.acceptance_rate, "mcmc": asdict(self.config)}
        head.update(header or {})
        with open(path, "w", newline="") as fh:
            for k, v in head.items():
                fh.write(f"# {k}: {json.dumps(v, sort_keys=True)}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            w.writerows([repr(float(v)) for v in row] for row in self.samples)


def _metropolis(log_ratio: Callable, bounds: ThetaBounds, config: McmcConfig, rng: np.random.Generator):
    """Generic random-walk MH; ``log_ratio(x, y)`` returns the log acceptance ratio for ``x -> y``."""
    x = np.asarray(config.start if config.start is not None else bounds.center, dtype=float)
    if not bounds.contains(x):
        raise ValueError("MCMC start lies outside the bounds")
    sd = np.broadcast_to(np.asarray(config.proposal_sd, dtype=float), x.shape)
    kept = []
    accepted = 0
    for i in range(config.n_samples):
        if i > 0:
            y = x + sd * rng.standard_normal(x.size)
            u = rng.random()
            if bounds.contains(y):
                r = log_ratio(x, y)
                if r >= 0 or u < math.exp(r):
                    x = y
                    accepted += 1
        if i >= config.burn_in and (i - config.burn_in) % config.thinning == 0:
            kept.append(x.copy())
    return np.array(kept), accepted / max(config.n_samples - 1, 1)


def joint_pair_difference(mean: np.ndarray, cov: np.ndarray, z: float) -> float:
    """``f(b) - f(a)`` for one draw of ``(f(a), f(b)) ~ N(mean, cov)`` driven by a standard normal ``z``.

    Only the difference enters the acceptance ratio, and the difference of a
    bivariate normal is normal with variance ``cov_aa + cov_bb - 2 cov_ab``.
    Sampling it directly keeps coincident points (singular ``cov``) exactly
    at zero.
    """
    var = max(cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1], 0.0)
    return float(mean[1] - mean[0] + math.sqrt(var) * z)


def mh_sample_gp_realization(surface: LikelihoodSurface, config: McmcConfig, rng, prior: Prior | None = None,
                             seed: int | None = None) -> PosteriorSamples:
    """MH where every acceptance ratio uses a fresh joint GP draw at the current and proposed points.

    The surface models ``-log L``; its negated latent GP is sampled.  The
    prior is added unless it is already part of the modelled objective.
    """
    if surface.kind != "log":
        raise ValueError("GP-realisation sampling needs a log-likelihood surface")
    rng = np.random.default_rng(rng)
    gp = surface.gp
    use_prior = prior is not None and not surface.prior_in_objective

    def log_ratio(x, y):
        mu, cov = gp.predict_cov(np.vstack([x, y]))
        diff = -joint_pair_difference(mu, cov, rng.standard_normal())
        if use_prior:
            diff += prior.logpdf(y) - prior.logpdf(x)
        return diff

    samples, acc = _metropolis(log_ratio, surface.bounds, config, rng)
    return PosteriorSamples(samples, acc, seed if seed is not None else -1, config, surface.bounds,
                            {"sampler": "gp-realization"})


def mh_sample_target(log_target: Callable, bounds: ThetaBounds, config: McmcConfig, rng,
                     seed: int | None = None) -> PosteriorSamples:
    """Standard MH on a deterministic log target."""
    rng = np.random.default_rng(rng)
    last: dict[bytes, float] = {}

    def value(x):
        key = x.tobytes()
        if key not in last:
            if len(last) > 1:
                last.clear()
            last[key] = float(log_target(x))
        return last[key]

    def log_ratio(x, y):
        fy = value(y)
        return -math.inf if fy == -math.inf else fy - value(x)

    samples, acc = _metropolis(log_ratio, bounds, config, rng)
    return PosteriorSamples(samples, acc, seed if seed is not None else -1, config, bounds, {"sampler": "mh"})


def mh_sample_abc(surface: LikelihoodSurface, config: McmcConfig, rng, prior: Prior | None = None,
                  seed: int | None = None) -> PosteriorSamples:
    """Standard MH on ``Phi((eps - G_mu) / G_s) * prior``."""
    if surface.kind != "abc":
        raise ValueError("ABC sampling needs an abc surface")

    def log_target(x):
        lp = prior.logpdf(x) if prior is not None else 0.0
        if lp == -math.inf:
            return -math.inf
        return float(surface.log_likelihood(x[None, :])[0]) + lp

    out = mh_sample_target(log_target, surface.bounds, config, rng, seed)
    out.meta["sampler"] = "abc"
    return out


def sample_posterior(surface: LikelihoodSurface, config: McmcConfig, seed: int,
                     prior: Prior | None = None) -> PosteriorSamples:
    rng = np.random.default_rng(seed)
    if surface.kind == "abc":
        return mh_sample_abc(surface, config, rng, prior, seed)
    return mh_sample_gp_realization(surface, config, rng, prior, seed)


# -- kernel density ---------------------------------------------------------------------------

MIN_BANDWIDTH = 1e-6
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


def scott_bandwidth(samples: np.ndarray) -> np.ndarray:
    """Per-dimension ``n^(-1/(d+4)) * std``; zero spreads fall back to a tiny bandwidth."""
    samples = np.atleast_2d(samples)
    n, d = samples.shape
    sd = samples.std(axis=0, ddof=1)
    sd = np.where(sd <= 1e-12 * np.maximum(1.0, np.abs(samples.mean(axis=0))), 0.0, sd)
    h = n ** (-1.0 / (d + 4)) * sd
    if np.any(h <= 0):
        log.warning("degenerate samples in %d dimension(s); using minimum bandwidth", int(np.sum(h <= 0)))
        h = np.where(h > 0, h, MIN_BANDWIDTH)
    return h


def kde_evaluate(samples: np.ndarray, points: np.ndarray, bandwidth: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Gaussian product-kernel density at ``points``."""
    samples = np.atleast_2d(samples)
    points = np.atleast_2d(points)
    norm = np.prod(bandwidth) * (2 * np.pi) ** (samples.shape[1] / 2)
    out = np.empty(len(points))
    for i in range(0, len(points), chunk):
        z = (points[i:i + chunk, None, :] - samples[None, :, :]) / bandwidth
        out[i:i + chunk] = np.exp(-0.5 * np.sum(z**2, axis=2)).mean(axis=1) / norm
    return out


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """KDE values on the tensor grid spanned by ``axes``."""

    axes: tuple[np.ndarray, ...]
    values: np.ndarray
    bandwidth: np.ndarray

    def integral(self) -> float:
        v = self.values
        for ax in reversed(self.axes):
            v = _trapezoid(v, ax, axis=-1)
        return float(v)

    def triples(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh] + [self.values.ravel()])


def grid_axes(bounds: ThetaBounds, n: int = 100) -> tuple[np.ndarray, ...]:
    return tuple(np.linspace(lo, hi, n) for lo, hi in zip(bounds.lower, bounds.upper))


def kde_density(samples, axes: Sequence[np.ndarray]) -> DensityEstimate:
    """Scott's-rule Gaussian KDE evaluated on the tensor grid of ``axes``."""
    data = samples.samples if isinstance(samples, PosteriorSamples) else np.atleast_2d(np.asarray(samples, float))
    if data.shape[0] == 1 and data.shape[1] > 1 and len(axes) == 1:
        data = data.T
    if len(data) < 2:
        raise ValueError("kde needs at least two samples")
    h = scott_bandwidth(data)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([m.ravel() for m in mesh])
    vals = kde_evaluate(data, pts, h).reshape(mesh[0].shape)
    return DensityEstimate(tuple(np.asarray(a) for a in axes), vals, h)


def density_slices(samples: PosteriorSamples, at: np.ndarray, n: int = 100) -> dict[tuple[int, int], np.ndarray]:
    """2-D slices of the full KDE through ``at`` for every pair of dimensions, as ``(x, y, density)`` rows."""
    data = samples.samples
    h = scott_bandwidth(data)
    axes = grid_axes(samples.bounds, n)
    out = {}
    for i, j in itertools.combinations(range(data.shape[1]), 2):
        X, Y = np.meshgrid(axes[i], axes[j], indexing="ij")
        pts = np.tile(np.asarray(at, dtype=float), (X.size, 1))
        pts[:, i] = X.ravel()
        pts[:, j] = Y.ravel()
        out[(i, j)] = np.column_stack([X.ravel(), Y.ravel(), kde_evaluate(data, pts, h)])
    return out


# -- point estimates and metrics --------------------------------------------------------------

def point_estimates(samples: PosteriorSamples, surface: LikelihoodSurface | None = None,
                    prior: Prior | None = None, log_target: Callable | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Posterior mean and MAP.

    The MAP maximises ``log_target`` (by default the surface's log-likelihood
    plus the log prior) over the kept samples, then refines it with a
    bounded local search.
    """
    mean = samples.mean()
    if log_target is None:
        if surface is None:
            raise ValueError("need a surface or a log target for the MAP")
        add_prior = prior is not None and not surface.prior_in_objective

        def log_target(x):
            lp = prior.logpdf(x) if add_prior else 0.0
            if lp == -math.inf:
                return -math.inf
            return float(surface.log_likelihood(np.asarray(x)[None, :])[0]) + lp

    uniq = np.unique(samples.samples, axis=0)
    vals = np.array([log_target(x) for x in uniq])
    x0 = uniq[int(np.argmax(vals))]
    bounds = samples.bounds

    def neg(x):
        v = log_target(x)
        return 1e300 if not math.isfinite(v) else -v

    res = optimize.minimize(neg, x0, method="L-BFGS-B", bounds=list(zip(bounds.lower, bounds.upper)))
    best = res.x if res.fun <= neg(x0) else x0
    return mean, np.asarray(best, dtype=float)


def evaluate_recovery(theta_hat, theta_true) -> float:
    d = np.asarray(theta_hat, dtype=float) - np.asarray(theta_true, dtype=float)
    return float(np.sqrt(np.mean(d**2)))


def evaluate_prediction(env_factory: Callable, theta_hat, test_obs: ObservationSet, *, n_sim: int = 1000,
                        seed: int = 0, q_params: QLearningParams | None = None) -> float:
    """Prediction error of the greedy policy trained at ``theta_hat`` on held-out summaries.

    Grid: per-start mean-absolute error in path length.  Menu: the menu
    discrepancy (log scale).
    """
    env = env_factory(np.asarray(theta_hat, dtype=float))
    q_params = q_params or default_q_params(env)
    rl_seed, sim_seed = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    policy = train_policy(env, q_params, int(rl_seed))
    sim = simulate_summaries(env, policy, n_sim, int(sim_seed))
    if test_obs.kind == "grid":
        return grid_mae(sim, test_obs, env.t_max)
    return menu_discrepancy(sim, test_obs)


def random_baseline_rmse(theta_true, bounds: ThetaBounds, n: int = 1_000_000, seed: int = 0) -> float:
    """Expected RMSE of a parameter drawn uniformly from the bounds."""
    rng = np.random.default_rng(seed)
    draws = bounds.from_unit(rng.random((n, bounds.dim)))
    d = draws - np.asarray(theta_true, dtype=float)
    return float(np.sqrt(np.mean(d**2, axis=1)).mean())
