"""Finite-difference generator of the filtering PDE, assembled in QTT form.

The grid index space of ``d`` axes with ``N = 2**L`` points each is
quantized axis by axis (all bits of axis 1 first, most significant bit
first), so a QTT operator has ``d * L`` binary cores.  Out-of-domain
stencil neighbours are dropped, which is the discrete version of a zero
Dirichlet boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import MaterializationError
from .model import Grid, ModelSpec
from .tt import (
    DEFAULT_MAX_ENTRIES,
    RoundingPolicy,
    TtMatrix,
    TtTensor,
    matrix_from_full,
    tt_add,
    tt_diag,
    tt_eye,
    tt_from_full,
    tt_kron,
    tt_matmul,
    tt_round,
    tt_scale,
    tt_zeros,
)

__all__ = [
    "CONVECTION_FORMS",
    "GeneratorOperator",
    "StabilityReport",
    "laplace_1d",
    "central_difference_1d",
    "sample_field",
    "assemble_laplace",
    "assemble_convection",
    "assemble_potential",
    "assemble_generator",
    "step_operator",
    "check_stability",
    "coordinate_tensor",
    "divergence_samples",
]

# "conservative": ((f u)_{l+1} - (f u)_{l-1}) / 2h
# "split": f_l (u_{l+1} - u_{l-1}) / 2h + (f_{l+1} - f_{l-1}) / 2h * u_l
CONVECTION_FORMS = ("conservative", "split")

_EXACT = RoundingPolicy(1e-14)


def laplace_1d(n: int, h: float) -> np.ndarray:
    """``tridiag(1, -2, 1) / h**2`` with Dirichlet truncation."""
    return (np.diag(np.full(n - 1, 1.0), -1) - 2.0 * np.eye(n) + np.diag(np.full(n - 1, 1.0), 1)) / h ** 2


def central_difference_1d(n: int, h: float) -> np.ndarray:
    """``tridiag(-1/2, 0, 1/2) / h``: row ``l`` gives ``(u_{l+1} - u_{l-1}) / 2h``."""
    return (np.diag(np.full(n - 1, 0.5), 1) - np.diag(np.full(n - 1, 0.5), -1)) / h


def _qtt_1d(mat: np.ndarray, L: int, policy: RoundingPolicy) -> TtMatrix:
    return matrix_from_full(mat, (2,) * L, (2,) * L, policy)


def _on_axis(op: TtMatrix, k: int, grid: Grid) -> TtMatrix:
    """``I (x) ... (x) op (x) ... (x) I`` with ``op`` in slot ``k``."""
    eye = tt_eye((2,) * grid.L)
    out = None
    for j in range(grid.d):
        term = op if j == k else eye
        out = term if out is None else tt_kron(out, term)
    return out


def sample_field(grid: Grid, values, policy: RoundingPolicy | None = None,
                 max_entries: int = DEFAULT_MAX_ENTRIES) -> TtTensor:
    """QTT of nodal samples.

    ``values`` is either an array of shape ``grid.shape`` or a callable taking
    the broadcastable coordinate arrays ``(x1, ..., xd)``.
    """
    policy = policy or RoundingPolicy()
    if grid.size > max_entries:
        raise MaterializationError(f"{grid.size} grid nodes exceed the materialization limit {max_entries}")
    if callable(values):
        with np.errstate(all="ignore"):
            values = np.broadcast_to(np.asarray(values(*grid.mesh()), dtype=float), grid.shape)
    values = np.asarray(values, dtype=float)
    if values.shape != grid.shape:
        raise ValueError(f"samples have shape {values.shape}, grid needs {grid.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("field is not finite on the grid")
    return tt_from_full(values, (2,) * (grid.d * grid.L), policy)


def coordinate_tensor(grid: Grid, k: int) -> TtTensor:
    """QTT of the ``k``-th coordinate: rank 1 across axes, exact within axis ``k``."""
    ones = TtTensor._wrap([np.ones((1, 2, 1))] * grid.L)
    x = tt_from_full(grid.axis(), (2,) * grid.L, _EXACT)
    out = None
    for j in range(grid.d):
        term = x if j == k else ones
        out = term if out is None else tt_kron(out, term)
    return out


def _combine(out, term, policy, recompress):
    if out is None:
        return term
    out = tt_add(out, term)
    return tt_round(out, policy) if recompress else out


def assemble_laplace(grid: Grid, policy: RoundingPolicy | None = None,
                     recompress: bool = True) -> TtMatrix:
    """``sum_k I (x) .. (x) Delta_1 (x) .. (x) I`` in QTT-matrix form.

    With ``recompress=False`` the Kronecker sum is kept exactly as assembled
    (ranks add) instead of being re-rounded after each term.
    """
    policy = policy or RoundingPolicy()
    lap = _qtt_1d(laplace_1d(grid.n, grid.h), grid.L, policy)
    out = None
    for k in range(grid.d):
        out = _combine(out, _on_axis(lap, k, grid), policy, recompress)
    return out


def divergence_samples(grid: Grid, model: ModelSpec) -> np.ndarray:
    """``sum_k (f_k(x + h e_k) - f_k(x - h e_k)) / 2h`` on the grid.

    Neighbour values at boundary nodes are taken from the field itself one
    mesh step outside the box.
    """
    out = np.zeros(grid.shape)
    for k in range(grid.d):
        out += (model.drift_samples(grid, k, grid.h) - model.drift_samples(grid, k, -grid.h)) / (2 * grid.h)
    return out


def assemble_convection(grid: Grid, model: ModelSpec, policy: RoundingPolicy | None = None,
                        form: str = "conservative", recompress: bool = True) -> TtMatrix:
    """Central-difference discretization of ``sum_i d(f_i u)/dx_i``.

    ``form="conservative"`` is ``D_k F_k``, the central difference of the
    product ``f_k u``.  ``form="split"`` is ``F_k D_k + diag(div_h f)`` with
    the divergence taken from drift values one step off the node.
    ``policy`` always governs the sampled drift fields; products and sums are
    only re-rounded when ``recompress`` is set.
    """
    policy = policy or RoundingPolicy()
    if form not in CONVECTION_FORMS:
        raise ValueError(f"unknown convection form {form!r}")
    if model.d != grid.d:
        raise ValueError("model and grid dimensions differ")
    cd = _qtt_1d(central_difference_1d(grid.n, grid.h), grid.L, policy)
    out = None
    for k in range(grid.d):
        fk = model.drift_samples(grid, k)
        if not np.all(np.isfinite(fk)):
            raise ValueError(f"drift component {k + 1} is not finite on the grid")
        if not np.any(fk):
            continue
        F = tt_diag(sample_field(grid, fk, policy))
        D = _on_axis(cd, k, grid)
        prod_policy = policy if recompress else None
        term = tt_matmul(F, D, prod_policy) if form == "split" else tt_matmul(D, F, prod_policy)
        out = _combine(out, term, policy, recompress)
    if form == "split":
        div = divergence_samples(grid, model)
        if not np.all(np.isfinite(div)):
            raise ValueError("drift divergence is not finite near the grid")
        if np.any(div):
            out = _combine(out, tt_diag(sample_field(grid, div, policy)), policy, recompress)
    if out is None:
        return tt_zeros((2,) * (grid.d * grid.L), (2,) * (grid.d * grid.L))
    return out


def assemble_potential(grid: Grid, model: ModelSpec, policy: RoundingPolicy | None = None) -> TtMatrix:
    """Diagonal operator of ``h^T S^{-1} h`` samples."""
    policy = policy or RoundingPolicy()
    return tt_diag(sample_field(grid, model.potential_samples(grid), policy))


@dataclass(frozen=True)
class GeneratorOperator:
    A: TtMatrix
    laplace: TtMatrix
    convection: TtMatrix
    potential: TtMatrix
    grid: Grid
    policy: RoundingPolicy
    form: str = "conservative"


def assemble_generator(grid: Grid, model: ModelSpec, policy: RoundingPolicy | None = None,
                       form: str = "conservative", recompress: bool = True) -> GeneratorOperator:
    """``A = (q/2) Laplace - C - (1/2) Q``, rounded to ``policy``.

    ``recompress=False`` keeps every sum and product exact; only the 1D
    stencils and sampled fields are compressed.
    """
    policy = policy or RoundingPolicy()
    lap = assemble_laplace(grid, policy, recompress)
    conv = assemble_convection(grid, model, policy, form, recompress)
    pot = assemble_potential(grid, model, policy)
    A = tt_scale(lap, 0.5 * model.q)
    A = _combine(A, tt_scale(conv, -1.0), policy, recompress)
    A = _combine(A, tt_scale(pot, -0.5), policy, recompress)
    return GeneratorOperator(A, lap, conv, pot, grid, policy, form)


def step_operator(gen: GeneratorOperator, tau: float, recompress: bool = True) -> TtMatrix:
    """One explicit Euler step ``tau A + I``."""
    out = tt_add(tt_scale(gen.A, tau), tt_eye(gen.A.row_shape))
    return tt_round(out, gen.policy) if recompress else out


@dataclass(frozen=True)
class StabilityReport:
    """Explicit-scheme stability diagnostic for time step ``tau``.

    Conditions: ``h < q / C_f`` and
    ``tau < (q d / h**2 + d L_f + (m / 2) C_h**2) ** -1``; with ``q = 1`` and
    ``m = d`` these are the classical bounds.
    """

    tau: float
    h: float
    C_f: float
    C_h: float
    L_f: float
    h_max: float
    tau_max: float

    @property
    def mesh_ok(self) -> bool:
        return self.h < self.h_max

    @property
    def step_ok(self) -> bool:
        return self.tau < self.tau_max

    @property
    def stable(self) -> bool:
        return self.mesh_ok and self.step_ok

    def to_dict(self) -> dict:
        return {"tau": self.tau, "h": self.h, "C_f": self.C_f, "C_h": self.C_h, "L_f": self.L_f,
                "h_max": self.h_max, "tau_max": self.tau_max,
                "mesh_ok": self.mesh_ok, "step_ok": self.step_ok}


def check_stability(grid: Grid, model: ModelSpec, tau: float) -> StabilityReport:
    C_f = 0.0
    L_f = 0.0
    for k in range(model.d):
        f = model.drift_samples(grid, k)
        C_f = max(C_f, float(np.max(np.abs(f))))
        for ax in range(grid.d):
            if grid.n > 1:
                L_f = max(L_f, float(np.max(np.abs(np.diff(f, axis=ax)))) / grid.h)
    C_h = max(float(np.max(np.abs(model.observation_samples(grid, i)))) for i in range(model.m))
    h_max = math.inf if C_f == 0 else model.q / C_f
    rate = model.q * grid.d / grid.h ** 2 + grid.d * L_f + 0.5 * model.m * C_h ** 2
    tau_max = math.inf if rate == 0 else 1.0 / rate
    return StabilityReport(float(tau), grid.h, C_f, C_h, L_f, h_max, tau_max)
