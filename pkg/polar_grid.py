# polar_grid.py
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp

__all__ = [
    "MIN_PHI",
    "MIN_RADIAL",
    "GridSizeError",
    "GridMismatchError",
    "FieldError",
    "PolarGrid",
    "ScalarField",
    "radial_nodes",
    "build_grid",
    "integrate",
    "l2_inner",
    "h1_inner",
    "h1_norm",
]

MIN_PHI = 8
MIN_RADIAL = 4


class GridSizeError(ValueError):
    """Raised when a grid is requested below the minimum node counts."""


class GridMismatchError(ValueError):
    """Raised when two operands live on different grids."""


class FieldError(ValueError):
    """Raised for mis-sized or non-finite grid values."""


def radial_nodes(n_radial: int) -> np.ndarray:
    """r_j = 2s - s^2 with s = j/(n_radial-1); r[0] = 0, r[-1] = 1."""
    s = np.arange(n_radial, dtype=float) / (n_radial - 1)
    r = -2.0 * (0.5 * s**2 - s)
    r[0] = 0.0
    r[-1] = 1.0
    return r


@dataclass(frozen=True, eq=False)
class PolarGrid:
    """Polar mesh of the unit disk.

    Nodes are stored flat with the angular index running fastest:
    node (i, j) (0-based) sits at ``i + j * n_phi``. Ring ``j = 0`` is the
    origin (all ``n_phi`` copies share one value), ring ``n_radial - 1`` is
    the boundary ``r = 1``.
    """

    n_phi: int
    n_radial: int
    phi: np.ndarray
    r: np.ndarray
    dphi: np.ndarray  # dphi[i] = phi[i] - phi[i-1], dphi[0] wraps to 2*pi - phi[-1]
    dr: np.ndarray  # dr[k] = r[k+1] - r[k]
    quad_w: np.ndarray

    @property
    def size(self) -> int:
        return self.n_phi * self.n_radial

    def flat(self, i: int, j: int) -> int:
        return (i % self.n_phi) + j * self.n_phi

    def matches(self, other: "PolarGrid") -> bool:
        # grids are fully determined by their node counts
        return self is other or (
            self.n_phi == other.n_phi and self.n_radial == other.n_radial
        )

    @cached_property
    def node_r(self) -> np.ndarray:
        return np.repeat(self.r, self.n_phi)

    @cached_property
    def node_phi(self) -> np.ndarray:
        return np.tile(self.phi, self.n_radial)

    @cached_property
    def node_x(self) -> np.ndarray:
        return self.node_r * np.cos(self.node_phi)

    @cached_property
    def node_y(self) -> np.ndarray:
        return self.node_r * np.sin(self.node_phi)

    @cached_property
    def boundary(self) -> np.ndarray:
        """Boolean mask of the r = 1 ring."""
        mask = np.zeros(self.size, dtype=bool)
        mask[(self.n_radial - 1) * self.n_phi :] = True
        return mask

    @cached_property
    def origin_ring(self) -> np.ndarray:
        mask = np.zeros(self.size, dtype=bool)
        mask[: self.n_phi] = True
        return mask

    @cached_property
    def interior(self) -> np.ndarray:
        return ~(self.boundary | self.origin_ring)

    @cached_property
    def origin_cell(self) -> float:
        """Area of the disk of radius dr[0]/2 that the origin row balances."""
        return math.pi * (0.5 * self.dr[0]) ** 2

    @cached_property
    def d_r(self) -> sp.csr_matrix:
        """Radial difference quotient, central inside, one-sided at both ends."""
        m = self.n_radial
        r = self.r
        d1 = sp.lil_matrix((m, m))
        d1[0, 0], d1[0, 1] = -1.0 / self.dr[0], 1.0 / self.dr[0]
        for j in range(1, m - 1):
            span = r[j + 1] - r[j - 1]
            d1[j, j - 1], d1[j, j + 1] = -1.0 / span, 1.0 / span
        d1[m - 1, m - 2], d1[m - 1, m - 1] = -1.0 / self.dr[-1], 1.0 / self.dr[-1]
        return sp.kron(d1.tocsr(), sp.identity(self.n_phi), format="csr")

    @cached_property
    def d_phi(self) -> sp.csr_matrix:
        """Periodic central angular difference divided by r; zero on the origin ring."""
        n = self.n_phi
        h = 2.0 * math.pi / n
        dt = sp.diags([-1.0, 1.0], [-1, 1], shape=(n, n), format="lil")
        dt[0, n - 1] = -1.0  # periodic
        dt[n - 1, 0] = 1.0
        dt = dt.tocsr() / (2.0 * h)
        inv_r = np.zeros_like(self.r)
        inv_r[1:] = 1.0 / self.r[1:]
        return sp.kron(sp.diags(inv_r), dt, format="csr")

    @cached_property
    def h1_gram(self) -> sp.csr_matrix:
        """G with h1_inner(f, g) = f^T G g."""
        w = sp.diags(self.quad_w)
        return sp.csr_matrix(
            w + self.d_r.T @ w @ self.d_r + self.d_phi.T @ w @ self.d_phi
        )

    @cached_property
    def free_basis(self) -> sp.csc_matrix:
        """Prolongation from the free unknowns (origin value, then every node
        strictly between the origin ring and the boundary) to all nodes."""
        n = self.n_phi
        free = np.flatnonzero(self.interior)
        rows = np.concatenate([np.arange(n), free])
        cols = np.concatenate([np.zeros(n, dtype=int), np.arange(1, free.size + 1)])
        return sp.csc_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(self.size, free.size + 1)
        )

    def zeros(self) -> "ScalarField":
        return ScalarField(self, np.zeros(self.size))

    def constant(self, value: float) -> "ScalarField":
        return ScalarField(self, np.full(self.size, float(value)))

    def sample(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> "ScalarField":
        """Evaluate ``func(r, phi)`` on every node."""
        values = np.asarray(func(self.node_r, self.node_phi), dtype=float)
        return ScalarField(self, np.broadcast_to(values, (self.size,)).copy())


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: PolarGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.size,):
            raise FieldError(
                f"field has shape {values.shape}, grid expects ({self.grid.size},)"
            )
        if not np.all(np.isfinite(values)):
            raise FieldError("field contains non-finite values")
        object.__setattr__(self, "values", values)

    def like(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def as_matrix(self) -> np.ndarray:
        """View as (n_radial, n_phi): row j holds ring j."""
        return self.values.reshape(self.grid.n_radial, self.grid.n_phi)

    def _other(self, other: "ScalarField | float") -> np.ndarray | float:
        if isinstance(other, ScalarField):
            _check_same(self, other)
            return other.values
        return float(other)

    def __add__(self, other: "ScalarField | float") -> "ScalarField":
        return self.like(self.values + self._other(other))

    __radd__ = __add__

    def __sub__(self, other: "ScalarField | float") -> "ScalarField":
        return self.like(self.values - self._other(other))

    def __mul__(self, other: "ScalarField | float") -> "ScalarField":
        return self.like(self.values * self._other(other))

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarField":
        return self.like(-self.values)


def build_grid(n_phi: int, n_radial: int) -> PolarGrid:
    if n_phi < MIN_PHI or n_radial < MIN_RADIAL:
        raise GridSizeError(
            f"grid ({n_phi}, {n_radial}) below minimum ({MIN_PHI}, {MIN_RADIAL})"
        )
    phi = 2.0 * math.pi * np.arange(n_phi, dtype=float) / n_phi
    dphi = np.full(n_phi, 2.0 * math.pi / n_phi)
    r = radial_nodes(n_radial)
    dr = np.diff(r)

    # trapezoid in r on g(r) * r, midpoint in phi
    radial_w = np.empty(n_radial)
    radial_w[0] = 0.5 * dr[0]
    radial_w[-1] = 0.5 * dr[-1]
    radial_w[1:-1] = 0.5 * (dr[:-1] + dr[1:])
    radial_w *= r
    quad_w = np.outer(radial_w, dphi).ravel()

    for arr in (phi, dphi, r, dr, quad_w):
        arr.setflags(write=False)
    return PolarGrid(n_phi, n_radial, phi, r, dphi, dr, quad_w)


def _check_same(f: ScalarField, g: ScalarField) -> None:
    if not f.grid.matches(g.grid):
        raise GridMismatchError(
            f"fields on ({f.grid.n_phi}, {f.grid.n_radial}) and "
            f"({g.grid.n_phi}, {g.grid.n_radial}) grids"
        )


def integrate(f: ScalarField) -> float:
    return float(f.grid.quad_w @ f.values)


def l2_inner(f: ScalarField, g: ScalarField) -> float:
    _check_same(f, g)
    return float(f.grid.quad_w @ (f.values * g.values))


def h1_inner(f: ScalarField, g: ScalarField) -> float:
    _check_same(f, g)
    grid = f.grid
    w = grid.quad_w
    mass = w @ (f.values * g.values)
    radial = w @ ((grid.d_r @ f.values) * (grid.d_r @ g.values))
    angular = w @ ((grid.d_phi @ f.values) * (grid.d_phi @ g.values))
    return float(mass + radial + angular)


def h1_norm(f: ScalarField) -> float:
    return math.sqrt(max(h1_inner(f, f), 0.0))
