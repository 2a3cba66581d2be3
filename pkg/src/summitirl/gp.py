"""Gaussian-process regression with an RBF kernel.

Inputs are mapped to the unit cube of the search box before the kernel is
applied, so a single lengthscale is shared by all dimensions and ``0.1``
means one tenth of every bound width.  ``predict`` returns the latent
standard deviation ``G_s`` (without observation noise) unless
``include_noise`` is set.

The prior mean is a constant, estimated by generalised least squares
(``"gls"``) or as the sample mean (``"sample"``).  The GLS estimate
discounts clusters of correlated points, which matters once optimisation
has concentrated the evaluations in a small region.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg, optimize

from .types import ThetaBounds

log = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4
N_RESTARTS = 8


class NumericalFailure(RuntimeError):
    """Kernel matrix stayed non positive-definite after maximal jitter."""


@dataclass(frozen=True)
class GpHyper:
    lengthscale: float
    signal_var: float
    noise_var: float

    def to_log(self) -> np.ndarray:
        return np.log([self.lengthscale, self.signal_var, self.noise_var])

    @classmethod
    def from_log(cls, z) -> "GpHyper":
        z = np.exp(np.asarray(z, dtype=float))
        return cls(float(z[0]), float(z[1]), float(z[2]))


def default_hyper(y: np.ndarray) -> GpHyper:
    """Lengthscale 0.1 of the box, signal variance half the squared target range, noise 0.1."""
    span = float(np.ptp(y)) if len(y) else 0.0
    signal = 0.5 * span**2 if span > 0 else 1.0
    return GpHyper(0.1, signal, 0.1)


def rbf(U: np.ndarray, V: np.ndarray, lengthscale: float, signal_var: float) -> np.ndarray:
    d2 = np.sum(U**2, 1)[:, None] + np.sum(V**2, 1)[None, :] - 2.0 * U @ V.T
    np.maximum(d2, 0.0, out=d2)
    return signal_var * np.exp(-0.5 * d2 / lengthscale**2)


def _cholesky(K: np.ndarray) -> tuple[np.ndarray, float]:
    try:
        return linalg.cholesky(K, lower=True), 0.0
    except linalg.LinAlgError:
        pass
    jitter = JITTER_START
    eye = np.eye(len(K))
    while jitter <= JITTER_MAX * (1 + 1e-9):
        try:
            return linalg.cholesky(K + jitter * eye, lower=True), jitter
        except linalg.LinAlgError:
            jitter *= 10.0
    raise NumericalFailure(f"kernel matrix not positive definite with jitter up to {JITTER_MAX:g}")


class GpModel:
    """Fitted GP; immutable once constructed.

    Parameters
    ----------
    X : (m, d) training inputs in parameter space.
    y : (m,) finite targets.
    bounds : search box used for input normalisation.
    hyper : kernel hyperparameters.
    """

    def __init__(self, X, y, bounds: ThetaBounds, hyper: GpHyper, mean: str = "gls"):
        self.X = np.atleast_2d(np.asarray(X, dtype=float)).copy()
        self.y = np.asarray(y, dtype=float).copy()
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("X and y have different numbers of rows")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("GP targets must be finite")
        if mean not in ("gls", "sample"):
            raise ValueError("mean must be 'gls' or 'sample'")
        self.bounds = bounds
        self.hyper = hyper
        self.mean = mean
        self.U = bounds.to_unit(self.X)
        K = rbf(self.U, self.U, hyper.lengthscale, hyper.signal_var) + hyper.noise_var * np.eye(len(self.y))
        self.L, self.jitter = _cholesky(K)
        self.mean_const = _gls_mean(self.L, self.y) if mean == "gls" else float(self.y.mean())
        self.alpha = linalg.cho_solve((self.L, True), self.y - self.mean_const)
        for arr in (self.X, self.y, self.U, self.L, self.alpha):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.y)

    def _k(self, Uq: np.ndarray) -> np.ndarray:
        return rbf(Uq, self.U, self.hyper.lengthscale, self.hyper.signal_var)

    def predict(self, Xq, include_noise: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean ``G_mu`` and standard deviation ``G_s`` at the rows of ``Xq``."""
        Uq = self.bounds.to_unit(np.atleast_2d(np.asarray(Xq, dtype=float)))
        Kq = self._k(Uq)
        mu = self.mean_const + Kq @ self.alpha
        v = linalg.solve_triangular(self.L, Kq.T, lower=True)
        var = self.hyper.signal_var - np.sum(v**2, axis=0)
        var = np.maximum(var, 0.0)
        if include_noise:
            var = var + self.hyper.noise_var
        return mu, np.sqrt(var)

    def predict_cov(self, Xq) -> tuple[np.ndarray, np.ndarray]:
        """Joint latent mean and covariance at the rows of ``Xq``."""
        Uq = self.bounds.to_unit(np.atleast_2d(np.asarray(Xq, dtype=float)))
        Kq = self._k(Uq)
        mu = self.mean_const + Kq @ self.alpha
        v = linalg.solve_triangular(self.L, Kq.T, lower=True)
        cov = rbf(Uq, Uq, self.hyper.lengthscale, self.hyper.signal_var) - v.T @ v
        return mu, 0.5 * (cov + cov.T)

    def grad_mean_unit(self, Uq) -> np.ndarray:
        """Gradient of ``G_mu`` with respect to unit-cube coordinates."""
        Uq = np.atleast_2d(Uq)
        Kq = self._k(Uq)
        diff = Uq[:, None, :] - self.U[None, :, :]
        return -np.einsum("qi,qid->qd", Kq * self.alpha[None, :], diff) / self.hyper.lengthscale**2

    def log_marginal_likelihood(self) -> float:
        r = self.y - self.mean_const
        return float(-0.5 * r @ self.alpha - np.log(np.diag(self.L)).sum() - 0.5 * self.n * np.log(2 * np.pi))

    def to_dict(self) -> dict:
        return {"X": self.X.tolist(), "y": self.y.tolist(), "bounds": self.bounds.to_dict(),
                "hyper": asdict(self.hyper), "mean": self.mean}

    @classmethod
    def from_dict(cls, d: dict) -> "GpModel":
        return cls(np.asarray(d["X"]), np.asarray(d["y"]), ThetaBounds.from_dict(d["bounds"]), GpHyper(**d["hyper"]),
                   d.get("mean", "gls"))


def _gls_mean(L: np.ndarray, y: np.ndarray) -> float:
    ones = np.ones_like(y)
    a = linalg.cho_solve((L, True), ones)
    return float(a @ y / (a @ ones))


def _neg_lml(z: np.ndarray, U: np.ndarray, y: np.ndarray, noise_fixed: float | None, mean: str) -> float:
    if noise_fixed is not None:
        z = np.append(z, np.log(noise_fixed))
    ell, sf2, sn2 = np.exp(z)
    K = rbf(U, U, ell, sf2)
    K[np.diag_indices_from(K)] += sn2
    try:
        L, _ = _cholesky(K)
    except NumericalFailure:
        return 1e25
    r = y - (_gls_mean(L, y) if mean == "gls" else y.mean())
    a = linalg.cho_solve((L, True), r)
    return float(0.5 * r @ a + np.log(np.diag(L)).sum())


def gp_fit(X, y, bounds: ThetaBounds, hyper_init: GpHyper | None = None, *, optimize_hyper: bool = True,
           noise_var: float | None = None, n_restarts: int = N_RESTARTS, seed: int = 0,
           mean: str = "gls") -> GpModel:
    """Fit a GP by maximising the log marginal likelihood.

    Nelder-Mead on log-hyperparameters is started from ``hyper_init`` and
    from ``n_restarts`` random perturbations of it; the best optimum wins.
    ``noise_var`` pins the noise variance instead of optimising it.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) < 2:
        raise ValueError("gp_fit needs at least two points")
    if not np.all(np.isfinite(y)):
        raise ValueError("gp_fit needs finite targets")
    init = hyper_init or default_hyper(y)
    if noise_var is not None:
        init = GpHyper(init.lengthscale, init.signal_var, noise_var)
    if not optimize_hyper:
        return GpModel(X, y, bounds, init, mean)

    U = bounds.to_unit(X)
    scale = max(float(np.var(y)), float(np.ptp(y)) ** 2)
    if scale < 1e-12:
        scale = 1.0
    box = [(np.log(1e-3), np.log(10.0)), (np.log(1e-6 * scale), np.log(1e3 * scale)), (np.log(1e-10), np.log(scale))]
    z0 = init.to_log()
    if noise_var is not None:
        z0, box = z0[:2], box[:2]
    lo = np.array([b[0] for b in box])
    hi = np.array([b[1] for b in box])
    z0 = np.clip(z0, lo, hi)
    rng = np.random.default_rng(seed)
    starts = [z0] + [np.clip(z0 + rng.normal(0.0, 1.0, z0.size), lo, hi) for _ in range(n_restarts)]
    best_z, best_f = z0, _neg_lml(z0, U, y, noise_var, mean)
    for s in starts:
        res = optimize.minimize(_neg_lml, s, args=(U, y, noise_var, mean), method="Nelder-Mead", bounds=box,
                                options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 400})
        if res.fun < best_f:
            best_z, best_f = res.x, float(res.fun)
    hyper = GpHyper.from_log(best_z if noise_var is None else np.append(best_z, 0.0))
    if noise_var is not None:
        hyper = GpHyper(hyper.lengthscale, hyper.signal_var, noise_var)
    log.debug("gp_fit m=%d hyper=%s nlml=%.4g", len(y), hyper, best_f)
    return GpModel(X, y, bounds, hyper, mean)
