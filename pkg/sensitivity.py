# sensitivity.py
from __future__ import annotations

import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from equilibrium import EquilibriumState, FixedPointParams, dphi, solve_equilibrium
from objective import evaluate_J
from operators import (
    RESIDUAL_TOL,
    SolverError,
    SparseSystem,
    assemble_laplacian,
    assemble_reaction,
    laplacian_for,
    row_scaling,
    scale_rhs,
    solve,
    solve_transpose,
)
from polar_grid import (
    GridMismatchError,
    PolarGrid,
    ScalarField,
    build_grid,
    h1_inner,
    l2_inner,
)

__all__ = [
    "LINEARIZATIONS",
    "RIESZ_METRICS",
    "DEFAULT_STEPS",
    "DensityLinearization",
    "GradientBundle",
    "GradientCheckReport",
    "linearize_density",
    "solve_adjoint",
    "helmholtz_system",
    "riesz_lift",
    "reduced_gradient",
    "directional_derivative",
    "smooth_perturbation",
    "gradient_check",
    "theorem_hypothesis",
]

logger = logging.getLogger(__name__)

LINEARIZATIONS = ("normalized", "pointwise")
RIESZ_METRICS = ("gram", "helmholtz")
DEFAULT_STEPS: Tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
FD_FIXED_POINT = FixedPointParams(tol=1e-12, max_sweeps=500)


@dataclass(frozen=True, eq=False)
class DensityLinearization:
    """Jacobian of the density with respect to U (equal to the one for u),
    stored as ``diag(diag) + outer(left, right)``. ``left``/``right`` are
    None for the pointwise form."""

    diag: np.ndarray
    left: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None

    def matvec(self, x: np.ndarray) -> np.ndarray:
        out = self.diag * x
        if self.left is not None and self.right is not None:
            out = out + self.left * float(self.right @ x)
        return out

    def rmatvec(self, y: np.ndarray) -> np.ndarray:
        out = self.diag * y
        if self.left is not None and self.right is not None:
            out = out + self.right * float(self.left @ y)
        return out


@dataclass(frozen=True, eq=False)
class GradientBundle:
    """``p`` is the adjoint PDE solution reported alongside; ``l2_form`` and
    ``grad`` come from the transposed discrete system."""

    p: ScalarField
    mu: ScalarField
    grad: ScalarField
    l2_form: ScalarField
    # the origin node has zero quadrature weight; its share of dJ is kept here
    origin_term: float = 0.0
    linearization: str = "normalized"
    metric: str = "gram"


@dataclass
class GradientCheckReport:
    steps: List[float]
    fd_values: List[float]
    adjoint_value: float
    rel_errors: List[float]
    min_error: float
    tolerance: float
    passed: bool
    linearization: str = "normalized"
    pointwise_value: Optional[float] = None
    pointwise_errors: List[float] = field(default_factory=list)

    @property
    def v_shaped(self) -> bool:
        """Error falls then rises again over the decreasing steps."""
        k = int(np.argmin(self.rel_errors))
        return 0 < k < len(self.rel_errors) - 1

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["v_shaped"] = self.v_shaped
        data["pointwise_min_error"] = (
            min(self.pointwise_errors) if self.pointwise_errors else None
        )
        return data


def linearize_density(state: EquilibriumState, mode: str = "normalized") -> DensityLinearization:
    """dPhi/dU at the state.

    "pointwise" is Phi^2 - Phi on the diagonal. "normalized" differentiates the
    quadrature-normalized density exactly: -diag(Phi) + Phi (w Phi)^T.
    """
    rho = state.rho.values
    if mode == "pointwise":
        return DensityLinearization(dphi(state.rho).values)
    if mode == "normalized":
        return DensityLinearization(-rho, rho, state.grid.quad_w * rho)
    raise ValueError(f"unknown linearization {mode!r}; expected one of {LINEARIZATIONS}")


def _adjoint_multiplier(
    state: EquilibriumState,
    V: ScalarField,
    lin: DensityLinearization,
    laplacian: SparseSystem,
) -> np.ndarray:
    """Solve L^T lam = K^T (w V) with L = -A - S K the linearized forward operator."""
    grid = state.grid
    s = row_scaling(grid)
    rhs = lin.rmatvec(grid.quad_w * V.values)
    if not np.any(rhs):
        return np.zeros(grid.size)
    base = assemble_reaction(grid, laplacian, ScalarField(grid, lin.diag))
    x0 = solve_transpose(base, rhs)
    if lin.left is None or lin.right is None:
        return x0
    # rank-one update: L^T = base^T - right (s*left)^T
    z = solve_transpose(base, lin.right)
    c = s * lin.left
    denom = 1.0 - float(c @ z)
    if abs(denom) < 1e-14:
        raise ZeroDivisionError("singular rank-one update in the adjoint system")
    return x0 + z * (float(c @ x0) / denom)


def solve_adjoint(
    state: EquilibriumState,
    V: ScalarField,
    *,
    laplacian: Optional[SparseSystem] = None,
) -> ScalarField:
    """Adjoint state p of -Laplace p - dPhi p = -V dPhi with p = 0 on the
    boundary, dPhi = Phi^2 - Phi the pointwise density derivative."""
    if not V.grid.matches(state.grid):
        raise GridMismatchError("valley does not live on the state grid")
    grid = state.grid
    system = laplacian if laplacian is not None else laplacian_for(grid)
    c = dphi(state.rho)
    p = solve(assemble_reaction(grid, system, c), scale_rhs(grid, -(V * c))).values
    p[grid.boundary] = 0.0
    return ScalarField(grid, p)


@lru_cache(maxsize=8)
def helmholtz_system(laplacian: SparseSystem) -> SparseSystem:
    grid = laplacian.grid
    return assemble_reaction(grid, laplacian, grid.constant(-1.0))


@lru_cache(maxsize=8)
def _gram_system(n_phi: int, n_radial: int) -> Tuple[sp.csc_matrix, sp.csc_matrix, Any]:
    grid = build_grid(n_phi, n_radial)
    basis = grid.free_basis
    reduced = sp.csc_matrix(basis.T @ grid.h1_gram @ basis)
    try:
        return basis, reduced, splu(reduced)
    except RuntimeError as e:
        raise SolverError(f"H1 Gram factorization failed: {e}") from e


def _gram_lift(g: ScalarField) -> ScalarField:
    grid = g.grid
    # the functional v -> l2_inner(g, v) + origin_cell * g(0) * v(0)
    b = grid.quad_w * g.values
    b[0] += grid.origin_cell * g.values[0]
    if not np.any(b):
        return grid.zeros()
    basis, reduced, lu = _gram_system(grid.n_phi, grid.n_radial)
    rhs = basis.T @ b
    y = lu.solve(rhs)
    residual = float(np.linalg.norm(reduced @ y - rhs)) / float(np.linalg.norm(rhs))
    if not np.all(np.isfinite(y)) or residual > RESIDUAL_TOL:
        raise SolverError("H1 Gram solve did not reach the residual target", residual)
    return g.like(basis @ y)


def riesz_lift(
    g: ScalarField,
    *,
    laplacian: Optional[SparseSystem] = None,
    metric: str = "helmholtz",
) -> ScalarField:
    """H1 representative mu of the L2 form g, zero on the boundary.

    "helmholtz" solves -Laplace mu + mu = g on the stencil. "gram" solves
    h1_inner(mu, v) = l2_inner(g, v) for every admissible v, the origin
    node weighted by its cell area.
    """
    if metric == "gram":
        return _gram_lift(g)
    if metric != "helmholtz":
        raise ValueError(f"unknown Riesz metric {metric!r}; expected one of {RIESZ_METRICS}")
    system = laplacian if laplacian is not None else laplacian_for(g.grid)
    mu = solve(helmholtz_system(system), scale_rhs(g.grid, g)).values
    mu[g.grid.boundary] = 0.0
    return g.like(mu)


def reduced_gradient(
    state: EquilibriumState,
    V: ScalarField,
    alpha: float,
    *,
    linearization: str = "normalized",
    laplacian: Optional[SparseSystem] = None,
    adjoint_sign: float = 1.0,
    metric: str = "gram",
) -> GradientBundle:
    """grad = alpha u + mu. The L2 form comes from the transposed discrete
    system, so it is the exact derivative of the discrete objective; with
    the "gram" metric -grad is a descent direction of it."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    grid = state.grid
    if not V.grid.matches(grid):
        raise GridMismatchError("valley does not live on the state grid")
    system = laplacian if laplacian is not None else laplacian_for(grid)
    s = row_scaling(grid)
    w = grid.quad_w

    lin = linearize_density(state, linearization)
    lam = adjoint_sign * _adjoint_multiplier(state, V, lin, system)
    dual = lin.rmatvec(w * V.values + s * lam)

    form = np.zeros(grid.size)
    weighted = w > 0
    form[weighted] = dual[weighted] / w[weighted]
    form[grid.origin_ring] = dual[0] / grid.origin_cell
    l2_form = ScalarField(grid, form)

    mu = riesz_lift(l2_form, laplacian=system, metric=metric)
    grad = alpha * state.u + mu
    p = solve_adjoint(state, V, laplacian=system)
    return GradientBundle(
        p=adjoint_sign * p,
        mu=mu,
        grad=grad,
        l2_form=l2_form,
        origin_term=float(dual[0]),
        linearization=linearization,
        metric=metric,
    )


def directional_derivative(
    state: EquilibriumState,
    V: ScalarField,
    alpha: float,
    bundle: GradientBundle,
    v: ScalarField,
) -> float:
    if not (v.grid.matches(state.grid) and V.grid.matches(state.grid)):
        raise GridMismatchError("direction does not live on the state grid")
    return (
        l2_inner(bundle.l2_form, v)
        + bundle.origin_term * float(v.values[0])
        + alpha * h1_inner(state.u, v)
    )


def smooth_perturbation(grid: PolarGrid, seed: int = 0) -> ScalarField:
    """(1 - r^2) times a random quadratic in x, y; zero on the boundary and
    single-valued at the origin."""
    c = np.random.default_rng(seed).standard_normal(5)
    x, y, r = grid.node_x, grid.node_y, grid.node_r
    poly = c[0] + c[1] * x + c[2] * y + c[3] * (x**2 - y**2) + c[4] * x * y
    values = (1.0 - r**2) * poly
    values[grid.boundary] = 0.0
    values[grid.origin_ring] = c[0]
    return ScalarField(grid, values)


def _rel_error(approx: float, exact: float) -> float:
    scale = max(abs(exact), np.finfo(float).tiny)
    return abs(approx - exact) / scale


def gradient_check(
    u: ScalarField,
    V: ScalarField,
    alpha: float,
    v: ScalarField,
    steps: Sequence[float] = DEFAULT_STEPS,
    *,
    fp: FixedPointParams = FD_FIXED_POINT,
    tolerance: float = 1e-4,
    linearization: str = "normalized",
    compare_pointwise: bool = True,
    adjoint_sign: float = 1.0,
    variant: str = "auto",
    threads: int = 1,
) -> GradientCheckReport:
    """Central differences of the reduced objective against the adjoint
    directional derivative, one pair of equilibrium solves per step."""
    steps = [float(h) for h in steps]
    if not steps or any(h <= 0 for h in steps):
        raise ValueError("steps must be positive")
    if any(b >= a for a, b in zip(steps, steps[1:])):
        raise ValueError("steps must be strictly decreasing")
    grid = u.grid
    system = laplacian_for(grid, variant)

    state = solve_equilibrium(u, grid, fp, laplacian=system)
    bundle = reduced_gradient(
        state, V, alpha, linearization=linearization, laplacian=system, adjoint_sign=adjoint_sign
    )
    exact = directional_derivative(state, V, alpha, bundle, v)

    # SuperLU handles are not shared across worker threads: one system per worker
    per_thread = threading.local()

    def worker_system() -> SparseSystem:
        if threads <= 1:
            return system
        local = getattr(per_thread, "system", None)
        if local is None:
            local = per_thread.system = assemble_laplacian(grid, system.variant)
        return local

    def j_at(h: float) -> float:
        st = solve_equilibrium(u + h * v, grid, fp, warm_start=state.U, laplacian=worker_system())
        return evaluate_J(st, V, alpha)

    points = [h for step in steps for h in (step, -step)]
    if threads <= 1:
        values = [j_at(h) for h in points]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            values = list(pool.map(j_at, points))

    fd = [(values[2 * k] - values[2 * k + 1]) / (2.0 * h) for k, h in enumerate(steps)]
    errors = [_rel_error(d, exact) for d in fd]
    for h, d, e in zip(steps, fd, errors):
        logger.info("gradcheck h=%.0e fd=% .12e adjoint=% .12e rel=%.3e", h, d, exact, e)
    min_error = min(errors)

    pointwise_value = None
    pointwise_errors: List[float] = []
    if compare_pointwise and linearization != "pointwise":
        pw = reduced_gradient(
            state, V, alpha, linearization="pointwise", laplacian=system, adjoint_sign=adjoint_sign
        )
        pointwise_value = directional_derivative(state, V, alpha, pw, v)
        pointwise_errors = [_rel_error(pointwise_value, d) for d in fd]

    return GradientCheckReport(
        steps=steps,
        fd_values=fd,
        adjoint_value=exact,
        rel_errors=errors,
        min_error=min_error,
        tolerance=tolerance,
        passed=bool(min_error <= tolerance),
        linearization=linearization,
        pointwise_value=pointwise_value,
        pointwise_errors=pointwise_errors,
    )


def theorem_hypothesis(lambda_1: float) -> Dict[str, Any]:
    """Poincare constant 1/lambda_1 and whether it stays below 4, the bound
    under which the control-to-state map is differentiable."""
    if not lambda_1 > 0 or not math.isfinite(lambda_1):
        raise ValueError(f"eigenvalue must be positive, got {lambda_1!r}")
    c = 1.0 / lambda_1
    return {"lambda_1": lambda_1, "poincare_constant": c, "holds": c < 4.0}
