"""Experiment configurations and drivers behind the command-line interface.

Every run is driven by one resolved configuration dictionary.  All random
streams are derived from ``config["seed"]`` with :class:`numpy.random.SeedSequence`
spawn keys, and every artifact embeds the resolved configuration.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .bo import BoConfig, run_algorithm1, write_records
from .envs.grid import GridWorld, generate_grid
from .envs.menu import MenuModel
from .likelihood import exact_loglik_enum, grid_discrepancy, mc_loglik
from .posterior import (McmcConfig, PosteriorSamples, density_slices, evaluate_prediction, evaluate_recovery,
                        grid_axes, kde_density, point_estimates, prior_from_config, random_baseline_rmse,
                        sample_posterior, uniform_prior)
from .rl import QLearningParams, simulate_summaries, train_policy
from .types import ObservationSet, ThetaBounds

log = logging.getLogger(__name__)

EXPERIMENTS = ("runtime", "grid-inference", "menu")
METHODS = ("exact", "mc", "abc", "random")

# spawn keys of the derived random streams
STREAM = {"truth_policy": 0, "observations": 1, "test": 2, "bo": 3, "mcmc": 4, "prediction": 5, "baseline": 6,
          "runtime": 7, "check": 8}

GRID_THETA = {1: [-0.5], 2: [-0.33, -0.67], 3: [-0.25, -0.5, -0.75]}
MENU_THETA = [2.6, 0.05, 0.8]
MENU_BOUNDS = {"lower": [0.0, 0.0, 0.0], "upper": [5.0, 1.0, 1.0], "names": ["f_dur", "d_sel", "p_rec"]}
MENU_PRIOR = [{"type": "truncnorm", "mu": 3.0, "sigma": 1.0}, {"type": "truncnorm", "mu": 0.3, "sigma": 0.3},
              {"type": "beta", "a": 3.0, "b": 1.35}]

DEFAULTS = {
    "grid-inference": {
        "environment": {"kind": "grid", "w": 9, "n_features": 2, "p_slip": 0.05, "r_step": -0.05, "r_goal": 1.0,
                        "t_max_factor": 10},
        "data": {"n_observations": 200, "n_test": 200, "max_steps": None},
        "method": "mc",
        "bo": {"n_opt": 200, "batch_size": 10, "n_mc": 1000, "kappa": 2.0, "exact_method": "dp"},
        "mcmc": {"n_samples": 10000, "burn_in": 1000, "thinning": 5, "proposal_sd": 0.1},
        "prediction": {"n_sim": 1000},
        "qlearning": {},
    },
    "menu": {
        "environment": {"kind": "menu", "p_sem": 0.9},
        "theta_true": MENU_THETA,
        "bounds": MENU_BOUNDS,
        "prior": MENU_PRIOR,
        "data": {"n_observations": 1000, "n_test": 1000},
        "method": "abc",
        "bo": {"n_opt": 300, "batch_size": 50, "n_mc": 1000, "kappa": 2.0},
        "mcmc": {"n_samples": 10000, "burn_in": 1000, "thinning": 5, "proposal_sd": [0.5, 0.1, 0.1]},
        "prediction": {"n_sim": 1000},
        "qlearning": {},
    },
    "runtime": {
        "sizes": [5, 7, 9],
        "methods": ["exact", "mc", "abc"],
        "repetitions": 5,
        "n_observations": 200,
        "n_mc": 1000,
        "environment": {"kind": "grid", "n_features": 0, "p_slip": 0.05, "r_step": -0.05, "r_goal": 1.0,
                        "t_max_factor": 10},
        "qlearning": {},
    },
}

PAPER_SCALE = {
    "menu": {"bo": {"n_opt": 1000, "batch_size": 50}, "qlearning": {"episodes": 5_000_000}},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config(path: str | Path | None, *, seed: int | None = None, method: str | None = None,
                paper_scale: bool = False, experiment: str | None = None) -> dict:
    """Read a YAML config, apply command-line overrides and fill defaults."""
    raw = yaml.safe_load(Path(path).read_text()) if path else {}
    raw = raw or {}
    if experiment is not None:
        raw["experiment"] = experiment
    return resolve_config(raw, seed=seed, method=method, paper_scale=paper_scale)


def resolve_config(raw: dict, *, seed: int | None = None, method: str | None = None,
                   paper_scale: bool = False) -> dict:
    exp = raw.get("experiment", "grid-inference")
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    cfg = _merge(DEFAULTS[exp], raw)
    cfg["experiment"] = exp
    if paper_scale or cfg.get("paper_scale"):
        cfg = _merge(cfg, PAPER_SCALE.get(exp, {}))
        cfg["paper_scale"] = True
    else:
        cfg["paper_scale"] = False
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg.setdefault("seed", 0)
    if method is not None:
        cfg["method"] = method
    cfg["version"] = __version__
    _validate(cfg)
    if exp == "grid-inference":
        env = cfg["environment"]
        env.setdefault("seed", cfg["seed"])
        cfg.setdefault("theta_true", GRID_THETA.get(env["n_features"]))
        cfg.setdefault("bounds", {"lower": [-1.0] * env["n_features"], "upper": [0.0] * env["n_features"]})
        cfg.setdefault("prior", None)
    return cfg


def _validate(cfg: dict) -> None:
    exp = cfg["experiment"]
    if exp == "runtime":
        if cfg["n_mc"] < 1:
            raise ConfigError("n_mc must be >= 1")
        if cfg["repetitions"] < 1 or cfg["n_observations"] < 1:
            raise ConfigError("repetitions and n_observations must be >= 1")
        bad = set(cfg["methods"]) - {"exact", "mc", "abc"}
        if bad:
            raise ConfigError(f"unknown runtime methods {sorted(bad)}")
        return
    if cfg["method"] not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {cfg['method']!r}")
    if cfg["data"]["n_observations"] < 1:
        raise ConfigError("n_observations must be >= 1")
    if cfg["bo"]["n_mc"] < 1:
        raise ConfigError("n_mc must be >= 1")
    if exp == "menu" and cfg["method"] == "exact":
        raise ConfigError("the menu model has no transition pmf; the exact method is unavailable")
    if exp == "grid-inference":
        nf = cfg["environment"]["n_features"]
        if nf < 1:
            raise ConfigError("grid inference needs n_features >= 1")
        if "theta_true" not in cfg and nf not in GRID_THETA:
            raise ConfigError(f"no default ground truth for n_features={nf}; set theta_true")


# -- seeds and builders ------------------------------------------------------------------

def stream(cfg: dict, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(cfg["seed"]), spawn_key=(STREAM[name], *extra))


def stream_int(cfg: dict, name: str, *extra: int) -> int:
    return int(stream(cfg, name, *extra).generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def build_env(cfg: dict):
    env = cfg["environment"]
    if env["kind"] == "grid":
        return generate_grid(env["w"], env["n_features"], env["seed"], p_slip=env["p_slip"], r_step=env["r_step"],
                             r_goal=env["r_goal"], t_max_factor=env["t_max_factor"],
                             theta=[0.0] * env["n_features"])
    kwargs = {k: v for k, v in env.items() if k != "kind"}
    if "relevance_probs" in kwargs:
        kwargs["relevance_probs"] = tuple(kwargs["relevance_probs"])
    return MenuModel(**kwargs)


def q_params_for(cfg: dict, env) -> QLearningParams:
    over = dict(cfg.get("qlearning") or {})
    if isinstance(env, GridWorld):
        return QLearningParams.for_grid(env.w, **over)
    return QLearningParams.for_menu(cfg.get("paper_scale", False), **over)


def bounds_for(cfg: dict) -> ThetaBounds:
    return ThetaBounds.from_dict(cfg["bounds"])


def prior_for(cfg: dict, bounds: ThetaBounds):
    return prior_from_config(cfg["prior"], bounds) if cfg.get("prior") else None


# -- artifact helpers --------------------------------------------------------------------

def provenance(cfg: dict, **seeds) -> dict:
    return {"config": cfg, "seeds": {"master": cfg["seed"], **seeds}}


def _guard(paths: list[Path], overwrite: bool) -> None:
    existing = [str(p) for p in paths if p.exists()]
    if existing and not overwrite:
        raise FileExistsError(f"refusing to overwrite {existing}; pass --overwrite")


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


# -- generate-data ---------------------------------------------------------------------------

def filter_max_steps(obs: ObservationSet, max_steps: int | None) -> tuple[ObservationSet | None, float]:
    """Drop grid summaries longer than ``max_steps``; returns the kept set and fraction."""
    if max_steps is None:
        return obs, 1.0
    kept = [s for s in obs.summaries if s.steps <= max_steps]
    frac = len(kept) / len(obs)
    return (ObservationSet(tuple(kept), obs.kind, obs.meta) if kept else None), frac


def generate_data(cfg: dict, out: Path | None = None, overwrite: bool = False) -> dict:
    """Train a policy at the ground truth and simulate observation and test sets."""
    if cfg["experiment"] == "runtime":
        raise ConfigError("generate-data is for the inference experiments")
    base = build_env(cfg)
    truth = base.with_theta(cfg["theta_true"])
    q = q_params_for(cfg, truth)
    seeds = {k: stream_int(cfg, k) for k in ("truth_policy", "observations", "test")}
    policy = train_policy(truth, q, seeds["truth_policy"])
    n, n_test = cfg["data"]["n_observations"], cfg["data"]["n_test"]
    obs = simulate_summaries(truth, policy, n, seeds["observations"])
    test = simulate_summaries(truth, policy, n_test, seeds["test"]) if n_test else None
    kept_frac = 1.0
    if obs.kind == "grid":
        obs, kept_frac = filter_max_steps(obs, cfg["data"].get("max_steps"))
        if obs is None:
            raise ConfigError("the step filter removed every observation")
    result = {"observations": obs, "test": test, "kept_fraction": kept_frac, "seeds": seeds}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "observations.csv", out / "test.csv", out / "data.json"]
        _guard(files, overwrite)
        header = provenance(cfg, **seeds)
        obs.to_csv(files[0], header)
        if test is not None:
            test.to_csv(files[1], header)
        write_json(files[2], {**header, "n_generated": n, "n_kept": len(obs), "kept_fraction": kept_frac})
    return result


# -- infer ---------------------------------------------------------------------------------------

def _env_factory(base):
    def factory(theta):
        return base.with_theta(np.asarray(theta, dtype=float))
    return factory


def infer(cfg: dict, obs: ObservationSet, test: ObservationSet | None, out: Path | None = None,
          overwrite: bool = False, jobs: int = 1) -> dict:
    """Surrogate construction, posterior sampling, density estimation and metrics."""
    base = build_env(cfg)
    bounds = bounds_for(cfg)
    prior = prior_for(cfg, bounds)
    method = cfg["method"]
    theta_true = np.asarray(cfg["theta_true"], dtype=float)
    factory = _env_factory(base)
    q = q_params_for(cfg, base)
    seeds = {k: stream_int(cfg, k) for k in ("bo", "mcmc", "prediction", "baseline")}
    files = {}
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        names = ["metrics.json"] + ([] if method == "random" else ["surface.json", "evaluations.csv", "chain.csv",
                                                                   "density.csv"])
        _guard([out / n for n in names], overwrite)
    header = provenance(cfg, **seeds)
    metrics: dict = {"method": method, "theta_true": theta_true.tolist()}

    if method == "random":
        rng = np.random.default_rng(seeds["baseline"])
        theta_mean = bounds.from_unit(rng.random(bounds.dim))
        theta_map = theta_mean
        metrics["expected_rmse"] = random_baseline_rmse(theta_true, bounds, seed=seeds["baseline"])
    else:
        bo = BoConfig(n_opt=cfg["bo"]["n_opt"], batch_size=cfg["bo"]["batch_size"], bounds=bounds, objective=method,
                      n_mc=cfg["bo"]["n_mc"], kappa=cfg["bo"]["kappa"], seed=seeds["bo"],
                      exact_method=cfg["bo"].get("exact_method", "dp"), abc_noise=cfg["bo"].get("abc_noise", True))
        surface, records = run_algorithm1(factory, obs, bo, q_params=q, jobs=jobs)
        mc = cfg["mcmc"]
        sd = mc["proposal_sd"]
        mcmc = McmcConfig(mc["n_samples"], mc["burn_in"], mc["thinning"], tuple(sd) if isinstance(sd, list) else sd)
        chain = sample_posterior(surface, mcmc, seeds["mcmc"], prior if prior is not None else uniform_prior(bounds))
        theta_mean, theta_map = point_estimates(chain, surface, prior)
        metrics.update({
            "acceptance_rate": chain.acceptance_rate,
            "n_evaluations": len(records),
            "n_skipped": bo.n_opt - len(records),
            "epsilon": surface.epsilon,
            "gp_hyper": surface.gp.hyper.__dict__,
            "posterior_sd": chain.samples.std(axis=0).tolist(),
            "posterior_corr": np.corrcoef(chain.samples.T).tolist() if bounds.dim > 1 else [[1.0]],
        })
        if out is not None:
            surface.meta["provenance"] = header
            surface.save(out / "surface.json")
            write_records(records, out / "evaluations.csv", header)
            chain.to_csv(out / "chain.csv", header)
            _write_density(chain, theta_map, out, header)
        files = {"surface": surface, "records": records, "chain": chain}
    metrics["posterior_mean"] = np.asarray(theta_mean).tolist()
    metrics["map"] = np.asarray(theta_map).tolist()
    metrics["rmse"] = evaluate_recovery(theta_mean, theta_true)
    if test is not None:
        metrics["prediction_error"] = evaluate_prediction(factory, theta_mean, test,
                                                          n_sim=cfg["prediction"]["n_sim"],
                                                          seed=seeds["prediction"], q_params=q)
    if out is not None:
        write_json(out / "metrics.json", {**header, "metrics": metrics})
    return {"metrics": metrics, **files}


def _write_density(chain: PosteriorSamples, at: np.ndarray, out: Path, header: dict) -> None:
    lines = [f"# {k}: {json.dumps(v, sort_keys=True, default=_json_default)}" for k, v in header.items()]
    if chain.bounds.dim == 2:
        rows = kde_density(chain, grid_axes(chain.bounds)).triples()
        _write_rows(out / "density.csv", lines, ["x", "y", "density"], rows)
    elif chain.bounds.dim == 1:
        dens = kde_density(chain, grid_axes(chain.bounds))
        _write_rows(out / "density.csv", lines, ["x", "density"], np.column_stack([dens.axes[0], dens.values]))
    else:
        slices = density_slices(chain, at)
        rows = np.vstack([np.column_stack([np.full(len(v), i), np.full(len(v), j), v]) for (i, j), v in slices.items()])
        _write_rows(out / "density.csv", lines + [f"# slice_at: {json.dumps(list(map(float, at)))}"],
                    ["dim_x", "dim_y", "x", "y", "density"], rows)


def _write_rows(path: Path, header_lines: list[str], columns: list[str], rows: np.ndarray) -> None:
    body = "\n".join(",".join(repr(float(v)) for v in r) for r in rows)
    path.write_text("\n".join(header_lines + [",".join(columns), body]) + "\n")


# -- benchmark-runtime ----------------------------------------------------------------------------

def first_iteration_time(env, obs: ObservationSet, method: str, q: QLearningParams, n_mc: int, seed: int) -> float:
    """Wall-clock of one loop body: RL, then the method's objective at one parameter value."""
    ss = np.random.SeedSequence(seed)
    rl_seed, sim_seed = (int(v >> np.uint64(1)) for v in ss.generate_state(2, dtype=np.uint64))
    t0 = time.perf_counter()
    policy = train_policy(env, q, rl_seed)
    if method == "exact":
        exact_loglik_enum(env, policy, obs)
    else:
        sim = simulate_summaries(env, policy, n_mc, sim_seed)
        if method == "mc":
            mc_loglik(env, policy, obs, n_mc, sim=sim)
        else:
            grid_discrepancy(sim, obs, env.t_max)
    return time.perf_counter() - t0


def benchmark_runtime(cfg: dict, out: Path | None = None, overwrite: bool = False) -> dict:
    """Time the first loop body of every method on feature-less grids of growing size."""
    env_cfg = cfg["environment"]
    # one untimed pass so compiled kernels are loaded before the first measurement
    warm = generate_grid(3, 0, 0)
    warm_q = QLearningParams.for_grid(3, episodes=10)
    warm_obs = simulate_summaries(warm, train_policy(warm, warm_q, 0), 5, 0)
    for method in cfg["methods"]:
        first_iteration_time(warm, warm_obs, method, warm_q, 10, 0)
    rows = []
    for w in cfg["sizes"]:
        for rep in range(cfg["repetitions"]):
            env = generate_grid(w, env_cfg["n_features"], stream_int(cfg, "runtime", w, rep), p_slip=env_cfg["p_slip"],
                                r_step=env_cfg["r_step"], r_goal=env_cfg["r_goal"],
                                t_max_factor=env_cfg["t_max_factor"], theta=[-0.5] * env_cfg["n_features"])
            q = q_params_for(cfg, env)
            policy = train_policy(env, q, stream_int(cfg, "truth_policy", w, rep))
            obs = simulate_summaries(env, policy, cfg["n_observations"], stream_int(cfg, "observations", w, rep))
            for method in cfg["methods"]:
                dt = first_iteration_time(env, obs, method, q, cfg["n_mc"], stream_int(cfg, "check", w, rep))
                rows.append({"w": w, "rep": rep, "method": method, "seconds": dt})
                log.info("w=%d rep=%d %s %.4fs", w, rep, method, dt)
    summary = summarize_runtime(rows)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        files = [out / "runtime.csv", out / "runtime_summary.json"]
        _guard(files, overwrite)
        header = provenance(cfg)
        lines = [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in header.items()]
        lines.append("w,rep,method,seconds")
        lines += [f"{r['w']},{r['rep']},{r['method']},{r['seconds']:.6f}" for r in rows]
        files[0].write_text("\n".join(lines) + "\n")
        write_json(files[1], {**header, "summary": summary})
    return {"rows": rows, "summary": summary}


def summarize_runtime(rows: list[dict]) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r["method"], {}).setdefault(str(r["w"]), []).append(r["seconds"])
    return {m: {w: {"mean_log10": float(np.mean(np.log10(v))), "median_s": float(np.median(v)), "n": len(v)}
                for w, v in by_w.items()} for m, by_w in out.items()}


# -- report -----------------------------------------------------------------------------------------

def collect_metrics(root: Path) -> list[dict]:
    rows = []
    for path in sorted(root.rglob("metrics.json")):
        payload = json.loads(path.read_text())
        m = payload["metrics"]
        rows.append({"run": str(path.parent.relative_to(root)) or ".", "method": m["method"],
                     "seed": payload["seeds"]["master"], "rmse": m["rmse"],
                     "prediction_error": m.get("prediction_error", math.nan),
                     "posterior_mean": m["posterior_mean"], "map": m["map"]})
    return rows


def report(root: Path) -> str:
    """Tabulate the metrics of every run below ``root`` and summarise per method."""
    rows = collect_metrics(root)
    if not rows:
        raise FileNotFoundError(f"no metrics.json below {root}")
    lines = ["run,method,seed,rmse,prediction_error"]
    lines += [f"{r['run']},{r['method']},{r['seed']},{r['rmse']:.6g},{r['prediction_error']:.6g}" for r in rows]
    lines.append("")
    lines.append("method,n,rmse_mean,rmse_sd,prediction_error_mean")
    for method in sorted({r["method"] for r in rows}):
        sel = [r for r in rows if r["method"] == method]
        rm = np.array([r["rmse"] for r in sel])
        pe = np.array([r["prediction_error"] for r in sel])
        lines.append(f"{method},{len(sel)},{rm.mean():.6g},{rm.std():.6g},{np.nanmean(pe) if np.isfinite(pe).any() else math.nan:.6g}")
    return "\n".join(lines) + "\n"


def load_observations(out: Path) -> tuple[ObservationSet, ObservationSet | None]:
    obs_path = out / "observations.csv"
    if not obs_path.exists():
        raise FileNotFoundError(f"{obs_path} missing; run generate-data first")
    test_path = out / "test.csv"
    return ObservationSet.from_csv(obs_path), (ObservationSet.from_csv(test_path) if test_path.exists() else None)

