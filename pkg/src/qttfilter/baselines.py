"""Reference solvers used to validate the QTT filter.

* a dense explicit finite-difference propagator and filter on the full grid,
* Euler-Maruyama simulation of state and observation paths,
* a bootstrap particle filter.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable

import numba
import numpy as np

from .errors import NumericalInstability, ZeroMassError
from .filter import EXP_CLAMP, ObservationSeries, PosteriorEstimate
from .model import Grid, ModelSpec
from .operators import CONVECTION_FORMS

__all__ = [
    "DensePropagator",
    "dense_fd_step",
    "dense_fd_filter",
    "TruthPath",
    "simulate_truth",
    "save_truth",
    "load_truth",
    "PFResult",
    "systematic_resample",
    "effective_sample_size",
    "particle_filter",
    "make_rng",
]


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; same seed gives the same stream on one platform."""
    return np.random.Generator(np.random.Philox(seed))


# ------------------------------------------------------------------ dense FD

@numba.njit(cache=True)
def _stencil_steps(u, c0, cp, cm, n, nsteps):
    size = u.size
    d = cp.shape[0]
    strides = np.empty(d, np.int64)
    s = 1
    for k in range(d - 1, -1, -1):
        strides[k] = s
        s *= n
    a = u.copy()
    b = np.empty_like(a)
    lk = np.zeros(d, np.int64)
    for _ in range(nsteps):
        lk[:] = 0
        for idx in range(size):
            acc = c0[idx] * a[idx]
            for k in range(d):
                st = strides[k]
                if lk[k] < n - 1:
                    acc += cp[k, idx] * a[idx + st]
                if lk[k] > 0:
                    acc += cm[k, idx] * a[idx - st]
            b[idx] = acc
            # advance the multi-index odometer
            k = d - 1
            lk[k] += 1
            while lk[k] == n and k > 0:
                lk[k] = 0
                k -= 1
                lk[k] += 1
        a, b = b, a
    return a


@numba.njit(cache=True)
def _stencil_steps_3d(u, c0, cp, cm, nsteps):
    # zero ghost layer stands in for the dropped out-of-grid neighbours, so the
    # inner loop is branch-free and vectorizes; accumulation order matches
    # _stencil_steps term for term
    n0, n1, n2 = c0.shape
    a = np.zeros((n0 + 2, n1 + 2, n2 + 2))
    a[1:-1, 1:-1, 1:-1] = u
    b = a.copy()
    for _ in range(nsteps):
        for i in range(n0):
            for j in range(n1):
                ao = a[i + 1, j + 1]
                ap0 = a[i + 2, j + 1]
                am0 = a[i, j + 1]
                ap1 = a[i + 1, j + 2]
                am1 = a[i + 1, j]
                bo = b[i + 1, j + 1]
                c0r = c0[i, j]
                p0 = cp[0, i, j]
                m0 = cm[0, i, j]
                p1 = cp[1, i, j]
                m1 = cm[1, i, j]
                p2 = cp[2, i, j]
                m2 = cm[2, i, j]
                for l in range(n2):
                    acc = c0r[l] * ao[l + 1]
                    acc += p0[l] * ap0[l + 1]
                    acc += m0[l] * am0[l + 1]
                    acc += p1[l] * ap1[l + 1]
                    acc += m1[l] * am1[l + 1]
                    acc += p2[l] * ao[l + 2]
                    acc += m2[l] * ao[l]
                    bo[l + 1] = acc
        a, b = b, a
    return a[1:-1, 1:-1, 1:-1].copy()


@dataclass(frozen=True)
class DensePropagator:
    """Coefficients of one explicit Euler step on the full grid.

    ``U_new[l] = c0[l] U[l] + sum_k cp[k, l] U[l + e_k] + cm[k, l] U[l - e_k]``,
    with neighbours outside the grid dropped.
    """

    grid: Grid
    tau: float
    c0: np.ndarray
    cp: np.ndarray
    cm: np.ndarray
    form: str = "conservative"

    @classmethod
    def build(cls, model: ModelSpec, grid: Grid, tau: float, form: str = "conservative") -> "DensePropagator":
        if form not in CONVECTION_FORMS:
            raise ValueError(f"unknown convection form {form!r}")
        if model.d != grid.d:
            raise ValueError("model and grid dimensions differ")
        model.check_finite(grid)
        h, d, q = grid.h, grid.d, model.q
        diff = tau * q / (2 * h * h)
        c0 = 1.0 - 2 * d * diff - 0.5 * tau * model.potential_samples(grid)
        cp = np.empty((d,) + grid.shape)
        cm = np.empty((d,) + grid.shape)
        for k in range(d):
            f = model.drift_samples(grid, k)
            if form == "conservative":
                # the neighbour's own drift value multiplies the neighbour
                fp = np.roll(f, -1, axis=k)
                fm = np.roll(f, 1, axis=k)
            else:
                fp = fm = f
                c0 = c0 - tau * (model.drift_samples(grid, k, h) - model.drift_samples(grid, k, -h)) / (2 * h)
            cp[k] = diff - tau * fp / (2 * h)
            cm[k] = diff + tau * fm / (2 * h)
        return cls(grid, float(tau), np.ascontiguousarray(c0.ravel()),
                   cp.reshape(d, -1).copy(), cm.reshape(d, -1).copy(), form)

    @cached_property
    def _padded_coefficients(self):
        # embed d <= 3 in three axes; the leading dummy axes have zero couplings
        d, n = self.grid.d, self.grid.n
        shape = (1,) * (3 - d) + (n,) * d
        cp = np.zeros((3,) + shape)
        cm = np.zeros((3,) + shape)
        cp[3 - d:] = self.cp.reshape((d,) + shape)
        cm[3 - d:] = self.cm.reshape((d,) + shape)
        return self.c0.reshape(shape), cp, cm

    def apply(self, u: np.ndarray, steps: int = 1) -> np.ndarray:
        arr = np.ascontiguousarray(u, dtype=np.float64)
        if self.grid.d <= 3:
            c0, cp, cm = self._padded_coefficients
            out = _stencil_steps_3d(arr.reshape(c0.shape), c0, cp, cm, int(steps))
        else:
            out = _stencil_steps(arr.ravel(), self.c0, self.cp, self.cm, self.grid.n, int(steps))
        return out.reshape(self.grid.shape)


def dense_fd_step(state: np.ndarray, prop: DensePropagator) -> np.ndarray:
    """One explicit step of the finite-difference scheme."""
    return prop.apply(state, 1)


def _grid_mean(u: np.ndarray, grid: Grid, mass: float) -> np.ndarray:
    x = grid.axis()
    out = np.empty(grid.d)
    for k in range(grid.d):
        axes = tuple(j for j in range(grid.d) if j != k)
        out[k] = np.dot(u.sum(axis=axes) if axes else u, x) / mass
    return out


def dense_fd_filter(model: ModelSpec, grid: Grid, observations: ObservationSeries, tau: float,
                    form: str = "conservative",
                    hooks: Iterable[Callable[[dict], None]] = ()) -> list[PosteriorEstimate]:
    """Same assimilate / propagate / estimate loop as the QTT filter, on dense arrays."""
    dT = observations.dT
    steps = int(round(dT / tau))
    if steps < 1 or abs(steps * tau - dT) > 1e-12 * max(1.0, dT):
        raise ValueError(f"tau={tau} does not divide the observation spacing {dT}")
    hooks = list(hooks)
    prop = DensePropagator.build(model, grid, dT / steps, form)
    hs = [model.observation_samples(grid, i) for i in range(model.m)]
    u = model.initial_samples(grid)
    if np.any(u < 0) or not u.sum() > 0:
        raise ZeroMassError("initial density must be non-negative with positive mass")
    u = u / u.sum()
    prop.apply(u, 0)  # load the compiled kernel outside the timed region
    y = observations.values
    log_mass = 0.0
    out = []
    t_exp = 0.0
    for j in range(1, len(observations)):
        if j > 1:
            t0 = time.perf_counter()
            arg = sum(hi * di for hi, di in zip(hs, y[j - 1] - y[j - 2]))
            if np.any(np.abs(arg) > EXP_CLAMP):
                warnings.warn("observation weight exponent clamped", RuntimeWarning, stacklevel=2)
                arg = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
            u = u * np.exp(arg)
            before = u.sum()
            if not before > 0:
                raise ZeroMassError(f"weighted density has mass {before!r}")
            u = u / before
            log_mass += math.log(before)
            t_exp = time.perf_counter() - t0
        t0 = time.perf_counter()
        u = prop.apply(u, steps)
        t_fke = time.perf_counter() - t0
        mass = float(u.sum())
        if not (math.isfinite(mass) and mass > 0):
            raise ZeroMassError(f"density mass {mass!r} at step {j}")
        if np.abs(u).sum() > 1e6 or not np.all(np.isfinite(u)):
            raise NumericalInstability(f"dense FD mass grew by {mass:.3e} over one interval; reduce tau")
        u = u / mass
        log_mass += math.log(mass)
        est = PosteriorEstimate(float(observations.times[0] + j * dT), _grid_mean(u, grid, 1.0), mass)
        out.append(est)
        if hooks:
            rec = {"step": j, "time": est.time, "mean": est.mean.tolist(), "mass_log": log_mass,
                   "effective_rank": None, "t_fke_seconds": t_fke, "t_exp_seconds": t_exp}
            for hook in hooks:
                hook(rec)
    return out


# ------------------------------------------------------------- truth paths

@dataclass(frozen=True)
class TruthPath:
    """Fine-step states and observations; index 0 is ``t = 0``."""

    dt: float
    states: np.ndarray
    observations: np.ndarray
    seed: int | None = None

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0]) * self.dt

    def observation_series(self, dT: float) -> ObservationSeries:
        k = int(round(dT / self.dt))
        if k < 1 or abs(k * self.dt - dT) > 1e-9 * dT:
            raise ValueError(f"dt={self.dt} does not divide dT={dT}")
        idx = np.arange(0, self.states.shape[0], k)
        return ObservationSeries(idx * self.dt, self.observations[idx])

    def states_at(self, dT: float) -> np.ndarray:
        k = int(round(dT / self.dt))
        return self.states[::k]


def simulate_truth(model: ModelSpec, T: float, dt: float = 1e-3, seed: int = 0,
                   observation_noise: bool = True) -> TruthPath:
    """Euler-Maruyama for ``dx = f dt + sqrt(q) dv``, ``dy = h dt + dw``."""
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * T:
        raise ValueError(f"dt={dt} does not divide T={T}")
    rng = make_rng(seed)
    xi = rng.standard_normal((n, model.d))
    eta = rng.standard_normal((n, model.m))
    X = np.empty((n + 1, model.d))
    Y = np.empty((n + 1, model.m))
    X[0] = model.initial_state
    Y[0] = 0.0
    sq = math.sqrt(model.q * dt)
    so = math.sqrt(dt) if observation_noise else 0.0
    x = X[0].copy()[None, :]
    for i in range(n):
        f = model.drift_at(x)[0]
        hx = model.observation_at(x)[0]
        Y[i + 1] = Y[i] + hx * dt + so * eta[i]
        X[i + 1] = X[i] + f * dt + sq * xi[i]
        x = X[i + 1][None, :]
    # a noise-free path does not depend on the seed, so do not record one
    noisy = model.q > 0 or observation_noise
    return TruthPath(float(dt), X, Y, seed if noisy else None)


def save_truth(path_obj: TruthPath, path) -> None:
    """Columns ``t, x1..xd, y1..ym``; one row per fine step after ``t = 0``."""
    d, m = path_obj.states.shape[1], path_obj.observations.shape[1]
    header = (f"dt={path_obj.dt!r} seed={path_obj.seed} d={d} m={m} "
              f"x0={','.join(repr(float(v)) for v in path_obj.states[0])}\n"
              + " ".join(["t"] + [f"x{i + 1}" for i in range(d)] + [f"y{i + 1}" for i in range(m)]))
    data = np.column_stack([path_obj.times, path_obj.states, path_obj.observations])[1:]
    np.savetxt(path, data, fmt="%.17g", header=header)


def load_truth(path) -> TruthPath:
    with open(path) as fh:
        meta_line = fh.readline()
    if not meta_line.startswith("#"):
        raise ValueError(f"{path} has no truth-path header")
    meta = dict(tok.split("=", 1) for tok in meta_line[1:].split())
    d, m = int(meta["d"]), int(meta["m"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # empty body is reported below
        data = np.loadtxt(path, ndmin=2)
    if data.shape[0] == 0:
        raise ValueError(f"{path} contains no observations")
    if data.shape[1] != 1 + d + m:
        raise ValueError(f"{path} has {data.shape[1]} columns, expected {1 + d + m}")
    x0 = np.array([float(v) for v in meta["x0"].split(",")])
    X = np.vstack([x0, data[:, 1:1 + d]])
    Y = np.vstack([np.zeros(m), data[:, 1 + d:]])
    seed = None if meta["seed"] == "None" else int(meta["seed"])
    return TruthPath(float(meta["dt"]), X, Y, seed)


# --------------------------------------------------------- particle filter

@dataclass(frozen=True)
class PFResult:
    estimates: list
    collapses: int
    resamples: int


def effective_sample_size(weights: np.ndarray) -> float:
    return 1.0 / float(np.sum(weights * weights))


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with one uniform offset on ``P`` evenly spaced positions."""
    P = weights.size
    positions = (rng.random() + np.arange(P)) / P
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def _initial_particles(model: ModelSpec, P: int, rng: np.random.Generator, cells: int = 64) -> np.ndarray:
    # tabulate the initial density on a midpoint lattice, pick cells, jitter inside
    a = model.domain
    w = 2 * a / cells
    centers = -a + (np.arange(cells) + 0.5) * w
    mesh = np.meshgrid(*([centers] * model.d), indexing="ij")
    pts = np.column_stack([g.ravel() for g in mesh])
    dens = np.clip(model.initial_at(pts), 0.0, None)
    if not dens.sum() > 0:
        raise ZeroMassError("initial density has no mass on the particle lattice")
    idx = rng.choice(pts.shape[0], size=P, p=dens / dens.sum())
    return pts[idx] + (rng.random((P, model.d)) - 0.5) * w


def particle_filter(model: ModelSpec, observations: ObservationSeries, P: int = 3000, seed: int = 0,
                    dt: float = 1e-3, initial_particles: np.ndarray | None = None,
                    collapse_loglik: float = -50.0) -> PFResult:
    """Bootstrap filter with Euler-Maruyama prediction and systematic resampling.

    Particles are weighted by the likelihood of each observation increment,
    ``N(h(x) dT, dT I)``.  If every particle's log-likelihood is below
    ``collapse_loglik`` the weights are reset to uniform and a warning is
    issued.  Estimates are weighted means at ``t_1 .. t_Nt``.
    """
    if P < 1:
        raise ValueError("need at least one particle")
    rng = make_rng(seed)
    dT = observations.dT
    k = max(1, int(round(dT / dt)))
    sub = dT / k
    if initial_particles is None:
        X = _initial_particles(model, P, rng)
    else:
        X = np.array(initial_particles, dtype=float).reshape(P, model.d)
    W = np.full(P, 1.0 / P)
    sq = math.sqrt(model.q * sub)
    y = observations.values
    out = []
    collapses = resamples = 0
    for j in range(1, len(observations)):
        for _ in range(k):
            X = X + model.drift_at(X) * sub + sq * rng.standard_normal(X.shape)
        resid = (y[j] - y[j - 1]) - model.observation_at(X) * dT
        loglik = -0.5 * np.sum(resid * resid, axis=1) / dT
        top = float(np.max(loglik))
        if top < collapse_loglik or not math.isfinite(top):
            collapses += 1
            warnings.warn(f"particle weights collapsed at t={observations.times[j]:g}; reset to uniform",
                          RuntimeWarning, stacklevel=2)
            W = np.full(P, 1.0 / P)
        else:
            W = W * np.exp(loglik - top)
            W = W / W.sum()
        out.append(PosteriorEstimate(float(observations.times[j]), W @ X, 1.0))
        if effective_sample_size(W) < P / 2:
            X = X[systematic_resample(W, rng)]
            W = np.full(P, 1.0 / P)
            resamples += 1
    return PFResult(out, collapses, resamples)
