"""Offline propagator construction and the online assimilation loop.

The offline stage compresses ``(tau A + I) ** steps``, one observation
interval of the explicit scheme, into a single QTT operator.  The online
stage then needs one Hadamard product and one matrix-vector product per
observation.
"""

from __future__ import annotations

import json
import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NumericalInstability, RankCapExceeded, ZeroMassError
from .model import Grid, ModelSpec
from .operators import (
    assemble_generator,
    check_stability,
    coordinate_tensor,
    sample_field,
    step_operator,
)
from .tt import (
    RoundingPolicy,
    TtMatrix,
    TtTensor,
    effective_rank,
    tt_dot,
    tt_from_full,
    tt_hadamard,
    tt_matmul,
    tt_matvec,
    tt_round,
    tt_scale,
    tt_sum,
    tt_to_full,
)

__all__ = [
    "OfflineBundle",
    "ObservationSeries",
    "FilterState",
    "PosteriorEstimate",
    "POWER_SCHEMES",
    "propagator_power",
    "offline_build",
    "save_bundle",
    "load_bundle",
    "initial_density",
    "weight_tensor",
    "resolve_weight_cap",
    "initialize",
    "assimilate",
    "estimate_state",
    "run_filter",
]

EXP_CLAMP = 700.0
BUNDLE_MAGIC = b"QTTFBNDL"
BUNDLE_VERSION = 1


POWER_SCHEMES = ("squaring", "sequential")


def propagator_power(base: TtMatrix, steps: int, policy: RoundingPolicy,
                     scheme: str = "squaring", allow_cap: bool = False) -> TtMatrix:
    """``base ** steps`` with a rounding after every product.

    ``scheme="squaring"`` uses binary exponentiation, at most ``2 log2 steps``
    products, each rounded at ``policy.epsilon / ceil(2 log2 steps)`` so the
    accumulated truncation stays within ``policy.epsilon``.
    ``scheme="sequential"`` multiplies by ``base`` ``steps - 1`` times and
    rounds each product at ``policy.epsilon``; its error is bounded by
    ``steps * epsilon`` but the ranks stay much smaller.
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError("steps must be a positive integer")
    if scheme not in POWER_SCHEMES:
        raise ValueError(f"unknown power scheme {scheme!r}")
    if base.row_shape != base.col_shape:
        raise ValueError("propagator power needs a square operator")
    if steps == 1:
        out = tt_round(base, policy)
    elif scheme == "sequential":
        b = tt_round(base, policy)
        out = b
        for _ in range(steps - 1):
            out = tt_matmul(b, out, policy)
    else:
        mult = policy.scaled(1.0 / math.ceil(2 * math.log2(steps)))
        out = None
        power = tt_round(base, mult)
        k = steps
        while True:
            if k & 1:
                out = power if out is None else tt_matmul(out, power, mult)
            k >>= 1
            if not k:
                break
            power = tt_matmul(power, power, mult)
    if out.capped and not allow_cap:
        raise RankCapExceeded(
            f"rank cap {policy.max_rank} reached while forming the propagator; "
            f"ranks {list(out.ranks)}")
    return out


@dataclass(frozen=True)
class OfflineBundle:
    """Everything the online stage needs; read-only once built."""

    propagator: TtMatrix
    grid: Grid
    model: ModelSpec
    tau: float
    dT: float
    steps: int
    build_policy: RoundingPolicy
    online_policy: RoundingPolicy
    form: str = "conservative"
    power_scheme: str = "sequential"
    stability: dict = field(default_factory=dict)

    @cached_property
    def observation_samples(self) -> list[np.ndarray]:
        return [self.model.observation_samples(self.grid, i) for i in range(self.model.m)]

    @cached_property
    def coordinates(self) -> list[TtTensor]:
        return [coordinate_tensor(self.grid, k) for k in range(self.grid.d)]


def offline_build(model: ModelSpec, grid: Grid, dT: float, steps: int,
                  build_policy: RoundingPolicy, online_policy: RoundingPolicy | None = None,
                  construction_eps: float = 1e-12, form: str = "conservative",
                  power_scheme: str = "sequential") -> OfflineBundle:
    if model.d != grid.d:
        raise ValueError(f"model has dimension {model.d}, grid has {grid.d}")
    steps = int(steps)
    if steps < 1 or not dT > 0:
        raise ValueError("need dT > 0 and steps >= 1")
    tau = dT / steps
    report = check_stability(grid, model, tau)
    if not report.stable:
        warnings.warn(f"explicit scheme may be unstable: tau={tau:.3e} (max {report.tau_max:.3e}), "
                      f"h={report.h:.3e} (max {report.h_max:.3e})", RuntimeWarning, stacklevel=2)
    gen = assemble_generator(grid, model, RoundingPolicy(construction_eps), form)
    prop = propagator_power(step_operator(gen, tau), steps, build_policy, power_scheme)
    return OfflineBundle(prop, grid, model, tau, dT, steps, build_policy,
                         online_policy or build_policy, form, power_scheme,
                         {**report.to_dict(), "stable": report.stable})


# ------------------------------------------------------------ serialization

def _policy_dict(p: RoundingPolicy) -> dict:
    return {"epsilon": p.epsilon, "max_rank": p.max_rank}


def save_bundle(bundle: OfflineBundle, path) -> None:
    """Binary container: magic, version, JSON header, little-endian float64 cores."""
    cores = bundle.propagator.cores
    header = {
        "grid": bundle.grid.to_dict(),
        "model": bundle.model.to_dict(),
        "tau": bundle.tau,
        "dT": bundle.dT,
        "steps": bundle.steps,
        "build_policy": _policy_dict(bundle.build_policy),
        "online_policy": _policy_dict(bundle.online_policy),
        "form": bundle.form,
        "power_scheme": bundle.power_scheme,
        "stability": bundle.stability,
        "row_shape": list(bundle.propagator.row_shape),
        "col_shape": list(bundle.propagator.col_shape),
        "ranks": list(bundle.propagator.ranks),
        "core_shapes": [list(c.shape) for c in cores],
        "capped": bundle.propagator.capped,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<IQ", BUNDLE_VERSION, len(blob)))
        fh.write(blob)
        for c in cores:
            fh.write(np.ascontiguousarray(c, dtype="<f8").tobytes())


def load_bundle(path) -> OfflineBundle:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != BUNDLE_MAGIC:
        raise ValueError(f"{path} is not a propagator bundle")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != BUNDLE_VERSION:
        raise ValueError(f"unsupported bundle version {version}")
    pos = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    cores = []
    for shp in header["core_shapes"]:
        count = int(np.prod(shp))
        cores.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shp))
        pos += 8 * count
    if pos != len(raw):
        raise ValueError("bundle payload length does not match its header")
    prop = TtMatrix(cores)
    prop = TtMatrix._wrap(prop.cores, bool(header.get("capped", False)))
    if list(prop.ranks) != header["ranks"]:
        raise ValueError("bundle ranks do not match its header")
    return OfflineBundle(
        propagator=prop,
        grid=Grid(**header["grid"]),
        model=ModelSpec.from_dict(header["model"]),
        tau=header["tau"],
        dT=header["dT"],
        steps=header["steps"],
        build_policy=RoundingPolicy(**header["build_policy"]),
        online_policy=RoundingPolicy(**header["online_policy"]),
        form=header["form"],
        power_scheme=header["power_scheme"],
        stability=header["stability"],
    )


# ------------------------------------------------------------- online stage

@dataclass(frozen=True)
class ObservationSeries:
    """Observations ``y(t_0) .. y(t_Nt)`` on a uniform time grid."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.values, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if t.ndim != 1 or t.size < 2:
            raise ValueError("need at least two observation times (t_0 and t_1)")
        if y.shape[0] != t.size:
            raise ValueError("times and values have different lengths")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        dt = np.diff(t)
        if np.any(np.abs(dt - dt[0]) > 1e-12) or dt[0] <= 0:
            raise ValueError("observation times must be increasing and uniformly spaced")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    @property
    def dT(self) -> float:
        return float(self.times[1] - self.times[0])

    def __len__(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class FilterState:
    density: TtTensor
    time: float
    normalization_log: float = 0.0
    last_mass: float = 1.0
    step: int = 0


@dataclass(frozen=True)
class PosteriorEstimate:
    time: float
    mean: np.ndarray
    mass: float


def initial_density(bundle: OfflineBundle) -> TtTensor:
    samples = bundle.model.initial_samples(bundle.grid)
    if np.any(samples < 0) or not np.all(np.isfinite(samples)):
        raise ValueError("initial density must be finite and non-negative on the grid")
    dens = sample_field(bundle.grid, samples, bundle.online_policy)
    if not tt_sum(dens) > 0:
        raise ZeroMassError("initial density has no mass on the grid")
    return dens


def _normalize(density: TtTensor, t: float, log0: float, step: int) -> FilterState:
    mass = tt_sum(density)
    if not (math.isfinite(mass) and mass > 0):
        raise ZeroMassError(f"density mass {mass!r} at t={t:g}")
    return FilterState(tt_scale(density, 1.0 / mass), t, log0 + math.log(mass), mass, step)


def weight_tensor(bundle: OfflineBundle, dy: np.ndarray, factored: bool = False) -> tuple[TtTensor, bool]:
    """QTT of ``exp(h(x) . dy)`` and whether the exponent had to be clamped.

    ``factored=True`` compresses each ``exp(h_i dy_i)`` separately and
    multiplies the factors; otherwise the full exponent is sampled at once.
    """
    dy = np.asarray(dy, dtype=float).ravel()
    pol = bundle.online_policy
    hs = bundle.observation_samples
    if len(dy) != len(hs):
        raise ValueError(f"observation increment has {len(dy)} components, model has {len(hs)}")
    clamped = False
    if factored:
        out = None
        bound = EXP_CLAMP / len(hs)
        for hi, di in zip(hs, dy):
            arg = hi * di
            if np.any(np.abs(arg) > bound):
                clamped = True
                arg = np.clip(arg, -bound, bound)
            fac = tt_from_full(np.exp(arg), (2,) * (bundle.grid.d * bundle.grid.L), pol)
            out = fac if out is None else tt_hadamard(out, fac, pol)
        return out, clamped
    arg = np.zeros(bundle.grid.shape)
    for hi, di in zip(hs, dy):
        arg += hi * di
    if np.any(np.abs(arg) > EXP_CLAMP):
        clamped = True
        arg = np.clip(arg, -EXP_CLAMP, EXP_CLAMP)
    return tt_from_full(np.exp(arg), (2,) * (bundle.grid.d * bundle.grid.L), pol), clamped


def initialize(bundle: OfflineBundle, t0: float = 0.0) -> FilterState:
    """Sample the initial density and propagate it to ``t_1``."""
    dens = initial_density(bundle)
    dens = tt_matvec(bundle.propagator, dens, bundle.online_policy)
    return _normalize(dens, t0 + bundle.dT, 0.0, 1)


def resolve_weight_cap(weight_cap, policy: RoundingPolicy) -> float | None:
    """``"auto"`` becomes ``ln(1 / epsilon)``; ``None`` disables the cap."""
    if weight_cap is None:
        return None
    if weight_cap == "auto":
        return math.log(1.0 / policy.epsilon)
    cap = float(weight_cap)
    if not cap > 0:
        raise ValueError("weight cap must be positive")
    return cap


def _capped_update(state: FilterState, dy: np.ndarray, bundle: OfflineBundle,
                   cap: float) -> tuple[TtTensor, float, bool]:
    # Rounding noise in the density is ~eps relative; a weight more than 1/eps
    # above its density-weighted average would lift that noise to signal size.
    grid = bundle.grid
    u = tt_to_full(state.density).reshape(grid.shape)
    arg = np.zeros(grid.shape)
    for hi, di in zip(bundle.observation_samples, dy):
        arg += hi * di
    mass = float(np.sum(u))
    if not (math.isfinite(mass) and mass > 0):
        raise ZeroMassError(f"density mass {mass!r} at t={state.time:g}")
    ref = float(np.sum(u * arg)) / mass
    shifted = arg - ref
    capped = bool(np.any(shifted > cap))
    w = np.exp(np.clip(shifted, -EXP_CLAMP, cap))
    dens = tt_from_full(u * w, (2,) * (grid.d * grid.L), bundle.online_policy)
    return dens, ref, capped


def assimilate(state: FilterState, y_prev, y_new, bundle: OfflineBundle,
               factored: bool = False, timings: dict | None = None,
               weight_cap=None) -> FilterState:
    """Weight the predicted density by the observation increment, then propagate.

    With ``weight_cap`` set (a positive float or ``"auto"``) the weighting is
    done on the full grid: the exponent is shifted by its density-weighted
    mean and capped at ``weight_cap`` before the product is recompressed.
    This keeps rounding noise in the tails from being amplified when the
    observation function is steep.  ``factored`` is ignored in that mode.
    """
    t_start = time.perf_counter()
    dy = np.asarray(y_new, dtype=float) - np.asarray(y_prev, dtype=float)
    if not np.all(np.isfinite(dy)):
        raise ValueError("observations must be finite")
    cap = resolve_weight_cap(weight_cap, bundle.online_policy)
    log0 = state.normalization_log
    capped = False
    if np.any(dy) and cap is not None:
        dens, ref, capped = _capped_update(state, dy, bundle, cap)
        log0 += ref
    elif np.any(dy):
        w, clamped = weight_tensor(bundle, dy, factored)
        if clamped:
            warnings.warn(f"observation weight exponent clamped to +-{EXP_CLAMP:g} at t={state.time:g}",
                          RuntimeWarning, stacklevel=2)
        dens = tt_hadamard(w, state.density, bundle.online_policy)
    else:
        dens = state.density
    t_mid = time.perf_counter()
    dens = tt_matvec(bundle.propagator, dens, bundle.online_policy)
    t_end = time.perf_counter()
    if timings is not None:
        timings["t_exp_seconds"] = t_mid - t_start
        timings["t_fke_seconds"] = t_end - t_mid
        timings["weight_capped"] = capped
    return _normalize(dens, state.time + bundle.dT, log0, state.step + 1)


def estimate_state(state: FilterState, grid: Grid, coordinates: Sequence[TtTensor] | None = None) -> PosteriorEstimate:
    """Conditional mean as a ratio of weighted sums of the density."""
    mass = tt_sum(state.density)
    if not (math.isfinite(mass) and mass > 0):
        raise ZeroMassError(f"density mass {mass!r} at t={state.time:g}")
    if coordinates is None:
        coordinates = [coordinate_tensor(grid, k) for k in range(grid.d)]
    mean = np.array([tt_dot(c, state.density) for c in coordinates]) / mass
    if not np.all(np.isfinite(mean)):
        raise NumericalInstability(f"non-finite state estimate at t={state.time:g}")
    return PosteriorEstimate(state.time, mean, state.last_mass)


def run_filter(bundle: OfflineBundle, observations: ObservationSeries,
               hooks: Iterable[Callable[[dict], None]] = (), factored: bool = False,
               weight_cap=None) -> list[PosteriorEstimate]:
    """Estimates at ``t_1 .. t_Nt``; each hook receives one diagnostics record per step.

    ``weight_cap`` is passed to :func:`assimilate`.
    """
    if abs(observations.dT - bundle.dT) > 1e-12:
        raise ValueError(f"observation spacing {observations.dT} differs from bundle dT {bundle.dT}")
    hooks = list(hooks)
    y = observations.values
    coords = bundle.coordinates
    t0 = time.perf_counter()
    state = initialize(bundle, float(observations.times[0]))
    timings = {"t_fke_seconds": time.perf_counter() - t0, "t_exp_seconds": 0.0, "weight_capped": False}
    out = []
    for j in range(1, len(observations)):
        if j > 1:
            state = assimilate(state, y[j - 2], y[j - 1], bundle, factored, timings, weight_cap)
        est = estimate_state(state, bundle.grid, coords)
        out.append(est)
        if hooks:
            rec = {
                "step": j,
                "time": est.time,
                "mean": est.mean.tolist(),
                "mass_log": state.normalization_log,
                "effective_rank": effective_rank(state.density),
                "t_fke_seconds": timings["t_fke_seconds"],
                "t_exp_seconds": timings["t_exp_seconds"],
                "weight_capped": timings["weight_capped"],
            }
            for hook in hooks:
                hook(rec)
    return out
