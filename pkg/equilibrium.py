# equilibrium.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from operators import SparseSystem, laplacian_for, scale_rhs, solve
from polar_grid import FieldError, GridMismatchError, PolarGrid, ScalarField, integrate

__all__ = [
    "FixedPointParams",
    "FixedPointError",
    "EquilibriumState",
    "phi_density",
    "dphi",
    "solve_equilibrium",
    "solve_equilibrium_robust",
    "uniqueness_gap",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FixedPointParams:
    tol: float = 1e-10
    max_sweeps: int = 200
    damping: float = 1.0

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError("fixed-point tolerance must be positive")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be at least 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")


class FixedPointError(RuntimeError):
    def __init__(self, message: str, residual: float, iterate: Optional[ScalarField] = None):
        super().__init__(f"{message} (last update {residual:.3e})")
        self.residual = residual
        self.iterate = iterate


@dataclass(frozen=True, eq=False)
class EquilibriumState:
    u: ScalarField
    U: ScalarField
    rho: ScalarField
    fp_iterations: int
    fp_residual: float
    log_partition: float = math.nan
    fp_history: Tuple[float, ...] = ()

    @property
    def grid(self) -> PolarGrid:
        return self.u.grid

    @property
    def mass(self) -> float:
        return integrate(self.rho)


def _density(U: ScalarField, u: ScalarField) -> Tuple[ScalarField, float]:
    if not U.grid.matches(u.grid):
        raise GridMismatchError("U and u live on different grids")
    z = -(U.values + u.values)
    shift = float(np.max(z))
    e = np.exp(z - shift)
    norm = float(U.grid.quad_w @ e)
    if not norm > 0.0 or not math.isfinite(norm):
        raise FieldError(f"degenerate density normalizer {norm!r}")
    return U.like(e / norm), math.log(norm) + shift


def phi_density(U: ScalarField, u: ScalarField) -> ScalarField:
    """exp(-(U+u)) normalized to unit mass by the grid quadrature."""
    return _density(U, u)[0]


def dphi(rho: ScalarField) -> ScalarField:
    """Pointwise derivative Phi^2 - Phi, shared by d/dU and d/du."""
    return rho.like(rho.values**2 - rho.values)


def solve_equilibrium(
    u: ScalarField,
    grid: PolarGrid,
    fp: FixedPointParams = FixedPointParams(),
    *,
    warm_start: Optional[ScalarField] = None,
    laplacian: Optional[SparseSystem] = None,
) -> EquilibriumState:
    """Fixed-point sweeps U <- (1 - theta) U + theta S(U), where S(U) solves
    -Laplace S(U) = Phi(U, u) with U = 0 on the boundary. Starts from U = 0
    unless a warm start is given."""
    if not u.grid.matches(grid):
        raise GridMismatchError("control does not live on the requested grid")
    system = laplacian if laplacian is not None else laplacian_for(grid)
    U = warm_start.values.copy() if warm_start is not None else np.zeros(grid.size)
    history = []
    residual = math.inf
    for sweep in range(1, fp.max_sweeps + 1):
        rho, _ = _density(ScalarField(grid, U), u)
        U_new = solve(system, scale_rhs(grid, rho)).values
        step = U_new - U
        residual = float(np.max(np.abs(step)))
        U = U + fp.damping * step if fp.damping < 1.0 else U_new
        history.append(residual)
        logger.debug("fixed-point sweep %d: max update %.3e", sweep, residual)
        if residual <= fp.tol:
            break
    else:
        raise FixedPointError(
            f"fixed point not reached in {fp.max_sweeps} sweeps",
            residual,
            ScalarField(grid, U),
        )

    U_field = ScalarField(grid, U)
    rho, log_z = _density(U_field, u)
    logger.info("equilibrium reached in %d sweeps (update %.3e)", sweep, residual)
    return EquilibriumState(u, U_field, rho, sweep, residual, log_z, tuple(history))


def solve_equilibrium_robust(
    u: ScalarField,
    grid: PolarGrid,
    fp: FixedPointParams = FixedPointParams(),
    *,
    warm_start: Optional[ScalarField] = None,
    laplacian: Optional[SparseSystem] = None,
    retries: int = 2,
) -> EquilibriumState:
    """solve_equilibrium, retrying with halved damping on non-convergence."""
    params = fp
    for _ in range(retries):
        try:
            return solve_equilibrium(u, grid, params, warm_start=warm_start, laplacian=laplacian)
        except FixedPointError as e:
            params = FixedPointParams(params.tol, params.max_sweeps, params.damping / 2.0)
            logger.warning("%s; retrying with damping %.3g", e, params.damping)
    return solve_equilibrium(u, grid, params, warm_start=warm_start, laplacian=laplacian)


def uniqueness_gap(
    u: ScalarField,
    grid: PolarGrid,
    fp: FixedPointParams = FixedPointParams(),
    *,
    perturbation: float = 0.1,
    laplacian: Optional[SparseSystem] = None,
) -> float:
    """Max-norm distance between the solution started from U = 0 and the one
    started from a perturbed copy of it."""
    first = solve_equilibrium(u, grid, fp, laplacian=laplacian)
    bump = perturbation * np.sin(np.pi * grid.node_r) * (1.0 + np.cos(grid.node_phi))
    bump[grid.origin_ring] = bump[0]
    start = ScalarField(grid, first.U.values + bump)
    second = solve_equilibrium(u, grid, fp, warm_start=start, laplacian=laplacian)
    return float(np.max(np.abs(first.U.values - second.U.values)))
