# operators.py
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Dict, Iterable, List, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from polar_grid import GridMismatchError, PolarGrid, ScalarField, build_grid

__all__ = [
    "STENCIL_VARIANTS",
    "RESIDUAL_TOL",
    "SolverError",
    "EigenvalueError",
    "SparseSystem",
    "row_scaling",
    "assemble_laplacian",
    "assemble_reaction",
    "scale_rhs",
    "solve",
    "solve_transpose",
    "smallest_eigenvalue",
    "manufactured_residual",
    "manufactured_error",
    "convergence_order",
    "adjudicate_stencil",
    "resolve_variant",
    "laplacian_for",
]

logger = logging.getLogger(__name__)

# "literal": interior radial diagonal taken term by term, (2r^2/(h+ + h-)) (1/h- - 1/h+)
# "symmetric": -(2r^2/(h+ + h-)) (1/h- + 1/h+), the usual three-point diagonal
STENCIL_VARIANTS = ("symmetric", "literal")
RESIDUAL_TOL = 1e-10
ORDER_THRESHOLD = 1.5
DEFAULT_LEVELS: Tuple[Tuple[int, int], ...] = ((16, 12), (32, 24), (64, 48))


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = math.inf):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class EigenvalueError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """The stored matrix is A; the solved system is ``-A x = rhs``."""

    grid: PolarGrid
    matrix: sp.csr_matrix
    variant: str = "symmetric"
    meta: Dict[str, str] = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def operator(self) -> sp.csr_matrix:
        return sp.csr_matrix(-self.matrix)

    @cached_property
    def lu(self):
        # one factorization per system; SuperLU objects are not shared across threads
        try:
            return splu(sp.csc_matrix(self.operator))
        except RuntimeError as e:
            raise SolverError(f"factorization failed: {e}") from e

    def row_nnz(self, row: int) -> int:
        start, stop = self.matrix.indptr[row], self.matrix.indptr[row + 1]
        return int(np.count_nonzero(self.matrix.data[start:stop]))


def row_scaling(grid: PolarGrid) -> np.ndarray:
    """Weights multiplying each row's source term: r_j^2 inside, the origin cell
    area at (0, 0), zero on equality and boundary rows."""
    s = np.zeros(grid.size)
    s[grid.interior] = grid.node_r[grid.interior] ** 2
    s[0] = grid.origin_cell
    return s


def assemble_laplacian(grid: PolarGrid, variant: str = "symmetric") -> SparseSystem:
    if variant not in STENCIL_VARIANTS:
        raise ValueError(f"unknown stencil variant {variant!r}")
    n, m = grid.n_phi, grid.n_radial
    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []

    def put(r: np.ndarray, c: np.ndarray, v: np.ndarray) -> None:
        rows.append(np.asarray(r))
        cols.append(np.asarray(c))
        vals.append(np.broadcast_to(np.asarray(v, dtype=float), np.shape(r)))

    i = np.arange(n)
    back = grid.dphi  # spacing to i-1
    fwd = np.roll(grid.dphi, -1)  # spacing to i+1
    ang_sum = back + fwd
    c_next = 2.0 / (ang_sum * fwd)
    c_prev = 2.0 / (ang_sum * back)
    ang_diag = -(2.0 / ang_sum) * (1.0 / back + 1.0 / fwd)

    for j in range(1, m - 1):
        rj = grid.r[j]
        hm, hp = grid.dr[j - 1], grid.dr[j]
        hs = hp + hm
        if variant == "symmetric":
            rad_diag = -(2.0 * rj**2 / hs) * (1.0 / hm + 1.0 / hp)
        else:
            rad_diag = (2.0 * rj**2 / hs) * (1.0 / hm - 1.0 / hp)
        row = i + j * n
        put(row, row, rad_diag + ang_diag)
        put(row, (i + 1) % n + j * n, c_next)
        put(row, (i - 1) % n + j * n, c_prev)
        put(row, i + (j + 1) * n, 2.0 * rj**2 / (hs * hp) + rj / hs)
        put(row, i + (j - 1) * n, 2.0 * rj**2 / (hs * hm) - rj / hs)

    # origin: finite-volume balance over the disk of radius dr[0]/2
    put(np.zeros(1, dtype=int), np.zeros(1, dtype=int), -math.pi)
    put(np.zeros(n, dtype=int), i + n, ang_sum / 4.0)
    # U_i1 = U_11 for the remaining copies of the origin
    put(i[1:], np.zeros(n - 1, dtype=int), -1.0)
    put(i[1:], i[1:], 1.0)
    # Dirichlet rows
    put(i + (m - 1) * n, i + (m - 1) * n, 1.0)

    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.size, grid.size),
    ).tocsr()
    return SparseSystem(grid, matrix, variant, {"kind": "laplacian"})


def assemble_reaction(grid: PolarGrid, base: SparseSystem, c: ScalarField) -> SparseSystem:
    """Add the zeroth-order coefficient c (row-scaled like the source term) to the
    diagonal; realizes -Laplace(x) - c x = g after de-scaling."""
    if base.dim != grid.size or not c.grid.matches(grid):
        raise GridMismatchError("reaction coefficient does not match the system")
    shift = row_scaling(grid) * c.values
    if not np.any(shift):
        return base
    matrix = sp.csr_matrix(base.matrix + sp.diags(shift))
    return SparseSystem(grid, matrix, base.variant, {"kind": "reaction"})


def scale_rhs(grid: PolarGrid, g: ScalarField) -> np.ndarray:
    if not g.grid.matches(grid):
        raise GridMismatchError("rhs field does not match the grid")
    return row_scaling(grid) * g.values


def _checked(system: SparseSystem, op: sp.csr_matrix, rhs: np.ndarray, trans: str) -> np.ndarray:
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (system.dim,):
        raise GridMismatchError(f"rhs has shape {rhs.shape}, system has dim {system.dim}")
    if not np.any(rhs):
        return np.zeros(system.dim)
    scale = max(float(np.linalg.norm(rhs)), np.finfo(float).tiny)
    x = system.lu.solve(rhs, trans=trans)
    residual = float(np.linalg.norm(op @ x - rhs)) / scale
    if residual > RESIDUAL_TOL:
        # one step of iterative refinement before giving up
        x = x + system.lu.solve(rhs - op @ x, trans=trans)
        residual = float(np.linalg.norm(op @ x - rhs)) / scale
    if not np.all(np.isfinite(x)) or residual > RESIDUAL_TOL:
        raise SolverError("linear solve did not reach the residual target", residual)
    return x


def solve(system: SparseSystem, rhs: np.ndarray) -> ScalarField:
    """Solve ``-A x = rhs``."""
    x = _checked(system, system.operator, rhs, "N")
    return ScalarField(system.grid, x)


def solve_transpose(system: SparseSystem, rhs: np.ndarray) -> np.ndarray:
    """Solve ``(-A)^T x = rhs``; used by the discrete adjoint."""
    return _checked(system, sp.csr_matrix(system.operator.T), rhs, "T")


def smallest_eigenvalue(
    system: SparseSystem, grid: PolarGrid, tol: float = 1e-6, max_iter: int = 500
) -> float:
    """Inverse power iteration for -Laplace x = lambda x with Dirichlet data."""
    s = row_scaling(grid)
    w = grid.quad_w
    x = 1.0 - grid.node_r**2
    lam = math.nan
    for it in range(1, max_iter + 1):
        y = solve(system, s * x).values
        lam_new = float(w @ (y * x)) / float(w @ (y * y))
        x = y / math.sqrt(float(w @ (y * y)))
        if it > 1 and abs(lam_new - lam) <= tol * abs(lam_new):
            logger.debug("inverse iteration converged after %d steps: %.8f", it, lam_new)
            return lam_new
        lam = lam_new
    raise EigenvalueError(f"inverse iteration did not converge in {max_iter} steps (last {lam})")


def manufactured_residual(grid: PolarGrid, variant: str) -> float:
    """Max interior row residual of U = (1 - r^2)/4, which solves -Laplace U = 1."""
    system = assemble_laplacian(grid, variant)
    exact = (1.0 - grid.node_r**2) / 4.0
    residual = -(system.matrix @ exact) - grid.node_r**2
    return float(np.max(np.abs(residual[grid.interior])))


def manufactured_error(grid: PolarGrid, variant: str = "auto") -> float:
    """Max nodal error of the discrete solution of -Laplace U = 1 against (1 - r^2)/4."""
    system = laplacian_for(grid, variant)
    U = solve(system, scale_rhs(grid, grid.constant(1.0)))
    return float(np.max(np.abs(U.values - (1.0 - grid.node_r**2) / 4.0)))


def convergence_order(errors: Iterable[float], n_radials: Iterable[int]) -> float:
    """Smallest pairwise empirical order, with h = 1/(n_radial - 1)."""
    errs = list(errors)
    hs = [1.0 / (m - 1) for m in n_radials]
    orders = []
    for (e0, h0), (e1, h1) in zip(zip(errs, hs), zip(errs[1:], hs[1:])):
        if e0 <= 0.0 or e1 <= 0.0:
            orders.append(math.inf)
        else:
            orders.append(math.log(e0 / e1) / math.log(h0 / h1))
    return min(orders) if orders else math.nan


def adjudicate_stencil(
    levels: Tuple[Tuple[int, int], ...] = DEFAULT_LEVELS,
    threshold: float = ORDER_THRESHOLD,
) -> Tuple[str, Dict[str, Dict[str, object]]]:
    """Pick the first stencil variant whose manufactured-solution residual decays
    with order >= threshold. Returns (variant, per-variant study)."""
    study: Dict[str, Dict[str, object]] = {}
    chosen = None
    for variant in STENCIL_VARIANTS:
        errors = [manufactured_residual(build_grid(n, m), variant) for n, m in levels]
        order = convergence_order(errors, [m for _, m in levels])
        passed = order >= threshold
        study[variant] = {
            "levels": [list(lv) for lv in levels],
            "residuals": errors,
            "order": order,
            "passed": passed,
        }
        logger.info("stencil %s: residual order %.3f", variant, order)
        if passed and chosen is None:
            chosen = variant
    if chosen is None:
        raise SolverError("no stencil variant passed the manufactured-solution order test")
    return chosen, study


@lru_cache(maxsize=None)
def _adjudicated(levels: Tuple[Tuple[int, int], ...]) -> str:
    return adjudicate_stencil(levels)[0]


def resolve_variant(variant: str = "auto") -> str:
    if variant == "auto":
        return _adjudicated(DEFAULT_LEVELS)
    if variant not in STENCIL_VARIANTS:
        raise ValueError(f"unknown stencil variant {variant!r}")
    return variant


@lru_cache(maxsize=16)
def _cached_laplacian(n_phi: int, n_radial: int, variant: str) -> SparseSystem:
    return assemble_laplacian(build_grid(n_phi, n_radial), variant)


def laplacian_for(grid: PolarGrid, variant: str = "auto") -> SparseSystem:
    """Shared Laplacian system for a grid size; callers running threads should
    assemble their own with assemble_laplacian."""
    return _cached_laplacian(grid.n_phi, grid.n_radial, resolve_variant(variant))
