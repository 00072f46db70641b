"""Experiment runner: truth simulation, offline build, online filtering, comparisons, rank tables."""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baselines import (
    TruthPath,
    dense_fd_filter,
    load_truth,
    particle_filter,
    save_truth,
    simulate_truth,
)
from .errors import MaterializationError, NumericalInstability, RankCapExceeded, ZeroMassError
from .filter import (
    OfflineBundle,
    load_bundle,
    offline_build,
    resolve_weight_cap,
    run_filter,
    save_bundle,
)
from .model import BUILTIN_MODELS, Grid, ModelSpec
from .operators import assemble_generator, sample_field, step_operator
from .tt import RoundingPolicy, effective_rank

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "main"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

BACKENDS = ("qtt", "fd", "pf")

# per-model defaults used when neither the config file nor a flag sets them
PRESETS = {
    "almost_linear": {"steps": 100, "eps_build": 5e-4},
    "cubic_sensor": {"steps": 200, "eps_build": 5e-5, "weight_cap": "auto"},
}

CSV_HELP = """\
output files (all CSV files have a header row):
  simulate  truth_NNN.txt        t x1..xd y1..ym, one row per fine step
  offline   bundle.qttf          binary propagator bundle
            offline.json         ranks, effective rank, build seconds, stability
  online    estimates_B_P.csv    step,time,x1..xd,mass_log,effective_rank,t_fke_seconds,t_exp_seconds
            diagnostics_B_P.json run summary for backend B on path P
  compare   pair_mse.csv         path,backend_a,backend_b,mse,max_abs_dev
            rmse.csv             path,backend,rmse
            runtime.csv          path,backend,seconds
            sweep.csv            eps_online,max_abs_dev,mse,seconds
            report.json, trajectory_path000.png, precision_sweep.png
  ranks     ranks.csv            L,N,f1..fd,potential,step_operator,propagator
"""


class ConfigError(ValueError):
    """Invalid experiment configuration or input file."""


@dataclass
class ExperimentConfig:
    model: ModelSpec
    grid_l: int = 6
    domain: float | None = None
    dt_obs: float = 0.05
    steps: int = 100
    T: float = 20.0
    eps_build: float = 5e-4
    eps_online: float | None = None
    construction_eps: float = 1e-12
    backends: tuple[str, ...] = ("qtt", "fd")
    paths: int = 1
    seed: int = 0
    dt: float = 1e-3
    particles: int = 3000
    weight_cap: str | float | None = None
    form: str = "conservative"
    power_scheme: str = "sequential"
    observation_noise: bool = True
    sweep: tuple[float, ...] = ()
    levels: tuple[int, ...] = (4, 5, 6, 7, 8)
    propagator_levels: tuple[int, ...] = (4, 5, 6)
    jobs: int = 1
    out: Path = field(default_factory=lambda: Path("results"))

    def __post_init__(self):
        self.validate()

    @property
    def grid(self) -> Grid:
        return Grid.dyadic(self.domain or self.model.domain, self.model.d, self.grid_l)

    @property
    def tau(self) -> float:
        return self.dt_obs / self.steps

    @property
    def build_policy(self) -> RoundingPolicy:
        return RoundingPolicy(self.eps_build)

    @property
    def online_policy(self) -> RoundingPolicy:
        return RoundingPolicy(self.eps_online or self.eps_build)

    def validate(self) -> None:
        for name in ("dt_obs", "T", "eps_build", "construction_eps", "dt"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.eps_online is not None and not self.eps_online > 0:
            raise ConfigError("eps_online must be positive")
        if any(not e > 0 for e in self.sweep):
            raise ConfigError("sweep tolerances must be positive")
        if self.domain is not None and not self.domain > 0:
            raise ConfigError("domain must be positive")
        if self.grid_l < 1 or self.steps < 1 or self.paths < 1 or self.jobs < 1 or self.particles < 1:
            raise ConfigError("grid_l, steps, paths, jobs and particles must be at least 1")
        if not _divides(self.dt_obs, self.T):
            raise ConfigError(f"T={self.T} is not a whole number of observation intervals dt_obs={self.dt_obs}")
        if not _divides(self.dt, self.dt_obs):
            raise ConfigError(f"fine step dt={self.dt} does not divide dt_obs={self.dt_obs}")
        bad = [b for b in self.backends if b not in BACKENDS]
        if bad or not self.backends:
            raise ConfigError(f"backends must be chosen from {BACKENDS}, got {list(self.backends)}")
        try:
            resolve_weight_cap(self.weight_cap, self.online_policy)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = self.model.to_dict()
        out["out"] = str(self.out)
        return out


def _divides(step: float, total: float) -> bool:
    k = round(total / step)
    return k >= 1 and abs(k * step - total) <= 1e-9 * total


# ------------------------------------------------------------------ config

def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(";", ",").split(",") if t.strip())


def _exprs(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(";") if t.strip())


def _cap(text):
    if text is None:
        return None
    text = str(text).strip().lower()
    if text in ("", "none", "off"):
        return None
    return "auto" if text == "auto" else float(text)


_PARSERS = {
    "grid_l": int, "domain": float, "dt_obs": float, "steps": int, "T": float,
    "eps_build": float, "eps_online": float, "construction_eps": float,
    "paths": int, "seed": int, "dt": float, "particles": int, "jobs": int,
    "weight_cap": _cap, "form": str, "power_scheme": str,
    "sweep": _floats, "levels": _ints, "propagator_levels": _ints,
    "backends": lambda s: tuple(b.strip() for b in s.split(",") if b.strip()),
    "out": Path,
}


def _inline_model(sec) -> ModelSpec:
    try:
        x0 = sec.get("x0")
        return ModelSpec(
            name=sec.get("name", "custom"),
            drift=_exprs(sec["drift"]),
            observation=_exprs(sec["observation"]),
            q=float(sec.get("q", "1.0")),
            initial=sec["initial"],
            domain=float(sec.get("domain", "5.0")),
            x0=None if not x0 else _floats(x0),
        )
    except KeyError as exc:
        raise ConfigError(f"[model] section is missing {exc.args[0]!r}") from None


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Defaults, then the model preset, then the config file, then ``overrides``."""
    values: dict = {}
    model = None
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if cp.has_section("model"):
            model = _inline_model(cp["model"])
        if cp.has_section("experiment"):
            sec = cp["experiment"]
            for key, raw in sec.items():
                if key == "model":
                    values["model_name"] = raw.strip()
                elif key == "observation_noise":
                    values[key] = sec.getboolean(key)
                elif key in _PARSERS:
                    try:
                        values[key] = _PARSERS[key](raw)
                    except ValueError:
                        raise ConfigError(f"bad value for {key}: {raw!r}") from None
                else:
                    raise ConfigError(f"unknown config key {key!r}")
    for key, v in (overrides or {}).items():
        if v is not None:
            values[key] = v
    name = values.pop("model_name", None)
    if name is not None and not (model is not None and model.name == name):
        if name not in BUILTIN_MODELS:
            raise ConfigError(f"unknown model {name!r}; built-in models: {sorted(BUILTIN_MODELS)}")
        model = BUILTIN_MODELS[name]
    elif model is None:
        model = BUILTIN_MODELS["almost_linear"]
    if "weight_cap" in values:
        values["weight_cap"] = _cap(values["weight_cap"])
    for key, v in PRESETS.get(model.name, {}).items():
        values.setdefault(key, v)
    try:
        return ExperimentConfig(model=model, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ----------------------------------------------------------------- helpers

def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path: Path, data) -> Path:
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _truth_for(cfg: ExperimentConfig, p: int) -> TruthPath:
    return simulate_truth(cfg.model, cfg.T, cfg.dt, seed=cfg.seed + p, observation_noise=cfg.observation_noise)


def _build(cfg: ExperimentConfig) -> tuple[OfflineBundle, float]:
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        bundle = offline_build(cfg.model, cfg.grid, cfg.dt_obs, cfg.steps, cfg.build_policy,
                               cfg.online_policy, cfg.construction_eps, cfg.form, cfg.power_scheme)
    return bundle, time.perf_counter() - t0


def _run_backend(cfg: ExperimentConfig, backend: str, truth: TruthPath, bundle: OfflineBundle | None,
                 seed: int) -> tuple[np.ndarray, list[dict], float]:
    """Estimates at ``t_1..t_Nt``, per-step records and wall seconds for one backend."""
    obs = truth.observation_series(cfg.dt_obs)
    recs: list[dict] = []
    t0 = time.perf_counter()
    if backend == "qtt":
        if bundle is None:
            bundle, _ = _build(cfg)
        est = run_filter(bundle, obs, [recs.append], weight_cap=cfg.weight_cap)
    elif backend == "fd":
        est = dense_fd_filter(cfg.model, cfg.grid, obs, cfg.tau, cfg.form, [recs.append])
    else:
        res = particle_filter(cfg.model, obs, cfg.particles, seed=seed, dt=cfg.dt)
        est = res.estimates
        recs = [{"step": j + 1, "time": e.time, "mean": e.mean.tolist(), "mass_log": None,
                 "effective_rank": None, "t_fke_seconds": None, "t_exp_seconds": None}
                for j, e in enumerate(est)]
        recs[-1]["collapses"] = res.collapses
    return np.array([e.mean for e in est]), recs, time.perf_counter() - t0


def _estimate_rows(recs: list[dict]):
    for r in recs:
        yield [r["step"], r["time"], *r["mean"], r["mass_log"], r["effective_rank"],
               r["t_fke_seconds"], r["t_exp_seconds"]]


def _estimate_header(d: int) -> list[str]:
    return ["step", "time", *[f"x{k + 1}" for k in range(d)], "mass_log", "effective_rank",
            "t_fke_seconds", "t_exp_seconds"]


# ---------------------------------------------------------------- commands

def _simulate_one(args):
    cfg, p = args
    path = cfg.out / f"truth_{p:03d}.txt"
    save_truth(_truth_for(cfg, p), path)
    return str(path)


def _pool_map(cfg: ExperimentConfig, fn, items):
    if cfg.jobs == 1 or len(items) == 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
        return list(pool.map(fn, items))


def cmd_simulate(cfg: ExperimentConfig) -> list[str]:
    cfg.out.mkdir(parents=True, exist_ok=True)
    files = _pool_map(cfg, _simulate_one, [(cfg, p) for p in range(cfg.paths)])
    for f in files:
        print(f)
    return files


def cmd_offline(cfg: ExperimentConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    bundle, secs = _build(cfg)
    path = cfg.out / "bundle.qttf"
    save_bundle(bundle, path)
    info = {
        "bundle": str(path),
        "ranks": list(bundle.propagator.ranks),
        "effective_rank": effective_rank(bundle.propagator),
        "build_seconds": secs,
        "stability": bundle.stability,
        "config": cfg.to_dict(),
    }
    _write_json(cfg.out / "offline.json", info)
    print(f"propagator effective rank {info['effective_rank']:.2f}, built in {secs:.1f} s -> {path}")
    return path


def _load_truths(cfg: ExperimentConfig, truth_files) -> list[tuple[str, TruthPath]]:
    if not truth_files:
        return [(f"path{p:03d}", _truth_for(cfg, p)) for p in range(cfg.paths)]
    out = []
    for f in truth_files:
        try:
            tp = load_truth(f)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read truth file {f}: {exc}") from None
        if tp.states.shape[1] != cfg.model.d or tp.observations.shape[1] != cfg.model.m:
            raise ConfigError(f"truth file {f} does not match model {cfg.model.name!r}")
        if not _divides(tp.dt, cfg.dt_obs) or tp.states.shape[0] - 1 < round(cfg.dt_obs / tp.dt):
            raise ConfigError(f"truth file {f} does not cover one observation interval of {cfg.dt_obs}")
        out.append((Path(f).stem, tp))
    return out


def cmd_online(cfg: ExperimentConfig, bundle_path=None, truth_files=()) -> list[Path]:
    cfg.out.mkdir(parents=True, exist_ok=True)
    truths = _load_truths(cfg, truth_files)
    bundle = None
    if "qtt" in cfg.backends:
        if bundle_path is not None:
            try:
                bundle = load_bundle(bundle_path)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load bundle {bundle_path}: {exc}") from None
            if abs(bundle.dT - cfg.dt_obs) > 1e-12:
                cfg = replace(cfg, dt_obs=bundle.dT, steps=bundle.steps)
        else:
            bundle, _ = _build(cfg)
    written = []
    for p, (name, tp) in enumerate(truths):
        for backend in cfg.backends:
            est, recs, secs = _run_backend(cfg, backend, tp, bundle, cfg.seed + p)
            csv_path = _write_csv(cfg.out / f"estimates_{backend}_{name}.csv",
                                  _estimate_header(cfg.model.d), _estimate_rows(recs))
            x = tp.states_at(cfg.dt_obs)[1:len(est) + 1]
            _write_json(cfg.out / f"diagnostics_{backend}_{name}.json", {
                "backend": backend,
                "path": name,
                "steps": len(recs),
                "seconds": secs,
                "rmse": float(np.sqrt(np.mean((est - x) ** 2))),
                "t_fke_seconds_total": sum(r["t_fke_seconds"] or 0.0 for r in recs),
                "t_exp_seconds_total": sum(r["t_exp_seconds"] or 0.0 for r in recs),
                "mean_effective_rank": None if recs[0]["effective_rank"] is None
                else float(np.mean([r["effective_rank"] for r in recs])),
                "config": cfg.to_dict(),
            })
            written.append(csv_path)
            print(csv_path)
    return written


def _compare_one(args):
    cfg, p, bundle = args
    truth = _truth_for(cfg, p)
    x = truth.states_at(cfg.dt_obs)[1:]
    res = {"path": p, "est": {}, "seconds": {}, "recs": {}}
    for backend in cfg.backends:
        est, recs, secs = _run_backend(cfg, backend, truth, bundle, cfg.seed + p)
        res["est"][backend] = est
        res["seconds"][backend] = secs
        res["recs"][backend] = recs
    res["truth"] = x
    res["times"] = truth.observation_series(cfg.dt_obs).times[1:]
    return res


def _sweep(cfg: ExperimentConfig, bundle: OfflineBundle, ref: np.ndarray) -> list[list]:
    truth = _truth_for(cfg, 0)
    obs = truth.observation_series(cfg.dt_obs)
    rows = []
    for eps in cfg.sweep:
        b = replace(bundle, online_policy=RoundingPolicy(eps))
        t0 = time.perf_counter()
        est = np.array([e.mean for e in run_filter(b, obs, weight_cap=cfg.weight_cap)])
        secs = time.perf_counter() - t0
        rows.append([eps, float(np.max(np.abs(est - ref))), float(np.mean((est - ref) ** 2)), secs])
    return rows


def cmd_compare(cfg: ExperimentConfig) -> dict:
    from .plotting import plot_precision_sweep, plot_rank_history, plot_trajectories

    cfg.out.mkdir(parents=True, exist_ok=True)
    bundle, build_secs = _build(cfg) if "qtt" in cfg.backends or cfg.sweep else (None, 0.0)
    results = _pool_map(cfg, _compare_one, [(cfg, p, bundle) for p in range(cfg.paths)])
    pair_rows, rmse_rows, time_rows = [], [], []
    backends = list(cfg.backends)
    for r in results:
        for i, a in enumerate(backends):
            rmse_rows.append([r["path"], a, float(np.sqrt(np.mean((r["est"][a] - r["truth"]) ** 2)))])
            time_rows.append([r["path"], a, r["seconds"][a]])
            for b in backends[i + 1:]:
                diff = r["est"][a] - r["est"][b]
                pair_rows.append([r["path"], a, b, float(np.mean(diff ** 2)), float(np.max(np.abs(diff)))])
    _write_csv(cfg.out / "pair_mse.csv", ["path", "backend_a", "backend_b", "mse", "max_abs_dev"], pair_rows)
    _write_csv(cfg.out / "rmse.csv", ["path", "backend", "rmse"], rmse_rows)
    _write_csv(cfg.out / "runtime.csv", ["path", "backend", "seconds"], time_rows)

    summary = {"config": cfg.to_dict(), "build_seconds": build_secs, "pairs": {}, "rmse": {}, "seconds": {}}
    for i, a in enumerate(backends):
        summary["rmse"][a] = float(np.mean([row[2] for row in rmse_rows if row[1] == a]))
        summary["seconds"][a] = float(np.mean([row[2] for row in time_rows if row[1] == a]))
        for b in backends[i + 1:]:
            summary["pairs"][f"{a}-{b}"] = float(np.mean([row[3] for row in pair_rows if row[1:3] == [a, b]]))
    first = results[0]
    plot_trajectories(cfg.out / "trajectory_path000.png", first["times"], first["truth"], first["est"])
    if "qtt" in first["recs"]:
        plot_rank_history(cfg.out / "rank_history_path000.png", first["times"],
                          [rec["effective_rank"] for rec in first["recs"]["qtt"]])
    if cfg.sweep:
        ref = first["est"]["fd"] if "fd" in first["est"] else _run_backend(cfg, "fd", _truth_for(cfg, 0), None, 0)[0]
        rows = _sweep(cfg, bundle, ref)
        _write_csv(cfg.out / "sweep.csv", ["eps_online", "max_abs_dev", "mse", "seconds"], rows)
        plot_precision_sweep(cfg.out / "precision_sweep.png", [r[0] for r in rows], [r[1] for r in rows],
                             [r[2] for r in rows])
        summary["sweep"] = [dict(zip(["eps_online", "max_abs_dev", "mse", "seconds"], r)) for r in rows]
    _write_json(cfg.out / "report.json", summary)
    for pair, mse in summary["pairs"].items():
        print(f"MSE {pair}: {mse:.3e}")
    for a in backends:
        print(f"RMSE {a} vs truth: {summary['rmse'][a]:.3f}  ({summary['seconds'][a]:.1f} s per path)")
    return summary


def rank_table(cfg: ExperimentConfig) -> list[list]:
    """Rows ``L, N, f1..fd, potential, step_operator, propagator`` of effective ranks."""
    exact = RoundingPolicy(cfg.construction_eps)
    rows = []
    for L in cfg.levels:
        grid = Grid.dyadic(cfg.domain or cfg.model.domain, cfg.model.d, L)
        fs = [effective_rank(sample_field(grid, cfg.model.drift_samples(grid, k), exact))
              for k in range(cfg.model.d)]
        pot = effective_rank(sample_field(grid, cfg.model.potential_samples(grid), exact))
        gen = assemble_generator(grid, cfg.model, exact, cfg.form, recompress=False)
        step = effective_rank(step_operator(gen, cfg.tau, recompress=False))
        prop = None
        if L in cfg.propagator_levels:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                b = offline_build(cfg.model, grid, cfg.dt_obs, cfg.steps, cfg.build_policy,
                                  construction_eps=cfg.construction_eps, form=cfg.form,
                                  power_scheme=cfg.power_scheme)
            prop = effective_rank(b.propagator)
        rows.append([L, 2 ** L, *fs, pot, step, prop])
    return rows


def cmd_ranks(cfg: ExperimentConfig) -> Path:
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows = rank_table(cfg)
    header = ["L", "N", *[f"f{k + 1}" for k in range(cfg.model.d)], "potential", "step_operator", "propagator"]
    path = _write_csv(cfg.out / "ranks.csv", header,
                      [[("" if v is None else (round(v, 4) if isinstance(v, float) else v)) for v in r] for r in rows])
    for r in rows:
        print(" ".join("-" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v)) for v in r))
    return path


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [experiment] and optional [model] sections")
    common.add_argument("--model", help=f"built-in model name ({', '.join(sorted(BUILTIN_MODELS))})")
    common.add_argument("--grid-l", type=int, help="log2 of grid points per axis")
    common.add_argument("--domain", type=float, help="half-width a of the box [-a, a]^d")
    common.add_argument("--dt-obs", type=float, help="observation interval")
    common.add_argument("--steps", type=int, help="explicit time steps per observation interval")
    common.add_argument("--T", type=float, dest="T", help="final time")
    common.add_argument("--eps-build", type=float, help="rounding precision of the propagator")
    common.add_argument("--eps-online", type=float, help="rounding precision of the online stage")
    common.add_argument("--weight-cap", help="'auto', a positive number, or 'none'")
    common.add_argument("--paths", type=int, help="number of truth paths")
    common.add_argument("--seed", type=int, help="seed of path 0; path p uses seed + p")
    common.add_argument("--backend", action="append", choices=BACKENDS,
                        help="filter backend; repeat to run several")
    common.add_argument("--particles", type=int, help="particle count of the pf backend")
    common.add_argument("--sweep", help="comma-separated online precisions for the compare sweep")
    common.add_argument("--levels", help="comma-separated L values for the rank table")
    common.add_argument("--jobs", type=int, help="worker processes for independent paths")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="qttfilter", description=__doc__, epilog=CSV_HELP,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "simulate truth paths"),
                       ("offline", "build and save the propagator bundle"),
                       ("online", "run filters on truth paths"),
                       ("compare", "compare backends over several paths"),
                       ("ranks", "effective-rank table of functions and operators")):
        p = sub.add_parser(name, parents=[common], help=text, epilog=CSV_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "online":
            p.add_argument("--bundle", help="bundle written by 'offline' (qtt backend)")
            p.add_argument("--truth", nargs="+", default=(), help="truth files written by 'simulate'")
    return parser


def _overrides(ns) -> dict:
    out = {
        "model_name": ns.model, "grid_l": ns.grid_l, "domain": ns.domain, "dt_obs": ns.dt_obs,
        "steps": ns.steps, "T": ns.T, "eps_build": ns.eps_build, "eps_online": ns.eps_online,
        "paths": ns.paths, "seed": ns.seed, "particles": ns.particles, "jobs": ns.jobs,
        "weight_cap": ns.weight_cap,
        "out": None if ns.out is None else Path(ns.out),
        "backends": None if not ns.backend else tuple(dict.fromkeys(ns.backend)),
    }
    try:
        if ns.sweep:
            out["sweep"] = _floats(ns.sweep)
        if ns.levels:
            out["levels"] = _ints(ns.levels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return out


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = load_config(ns.config, _overrides(ns))
        if ns.command == "simulate":
            cmd_simulate(cfg)
        elif ns.command == "offline":
            cmd_offline(cfg)
        elif ns.command == "online":
            cmd_online(cfg, ns.bundle, ns.truth)
        elif ns.command == "compare":
            cmd_compare(cfg)
        else:
            cmd_ranks(cfg)
    except (NumericalInstability, RankCapExceeded, ZeroMassError, MaterializationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
